//! Gradient-guided token selection: first-order error analysis, per-position
//! importance sums, Top-K selection and the restricted activation statistic.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_FRACTION: f64 = 0.5;

/// `Σ_i g_iᵀ δx_i`, the first-order change of the scalar proxy loss.
pub fn first_order_output_error<T: Scalar>(grads: &Tensor<T>, deltas: &Tensor<T>) -> Result<f64> {
    if grads.shape() != deltas.shape() {
        return Err(Error::Shape {
            op: "first_order_output_error",
            lhs: grads.shape().to_vec(),
            rhs: deltas.shape().to_vec(),
        });
    }
    Ok(grads
        .data()
        .iter()
        .zip(deltas.data())
        .map(|(&g, &d)| (g * d).widen())
        .sum())
}

/// Aggregated gradient magnitude per token position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenImportance<T> {
    pub sums: Vec<T>,
    pub batch: usize,
    pub layer: usize,
}

/// `sums[n] = Σ_b mean_c |g_{b,n,c}|`. Per-position contributions are added
/// in sorted order, so the result does not depend on batch order.
pub fn token_importance_sums<T: Scalar>(grads: &[Tensor<T>], layer: usize) -> Result<TokenImportance<T>> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Config("token importance needs at least one sample".into()))?;
    if first.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: first.shape().to_vec(),
            reason: "per-sample gradients must be N×C".into(),
        });
    }
    for g in grads {
        if g.shape() != first.shape() {
            return Err(Error::Shape {
                op: "token_importance_sums",
                lhs: first.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let means: Vec<Vec<T>> = grads.iter().map(token_means).collect();
    importance_from_means(&means, layer)
}

/// `mean_c |g_{n,c}|` for every row of one `N×C` sample gradient.
pub fn token_means<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let inv_c = T::one() / T::of(g.cols().max(1) as f64);
    g.row_iter()
        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v.abs()) * inv_c)
        .collect()
}

/// Combines per-sample [`token_means`] into importance sums.
pub fn importance_from_means<T: Scalar>(means: &[Vec<T>], layer: usize) -> Result<TokenImportance<T>> {
    let n = means.first().map_or(0, Vec::len);
    if means.iter().any(|m| m.len() != n) {
        return Err(Error::Config("per-sample token means differ in length".into()));
    }
    let mut sums = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(means.len());
    for pos in 0..n {
        parts.clear();
        parts.extend(means.iter().map(|m| m[pos]));
        parts.sort_by(|a, b| a.partial_cmp(b).expect("finite gradients"));
        sums.push(parts.iter().fold(T::zero(), |a, &v| a + v));
    }
    Ok(TokenImportance {
        sums,
        batch: means.len(),
        layer,
    })
}

/// [`token_importance_sums`] over the samples of a `B×N×C` gradient tensor.
pub fn token_importance_batched<T: Scalar>(grads: &Tensor<T>, layer: usize) -> Result<TokenImportance<T>> {
    let per_sample = (0..grads.batch())
        .map(|b| grads.sample(b))
        .collect::<Result<Vec<_>>>()?;
    token_importance_sums(&per_sample, layer)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectedTokens {
    /// Sorted token positions.
    pub indices: Vec<usize>,
    pub fraction: f64,
}

/// `K = ceil(fraction·N)`, at least 1.
pub fn top_k_count(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "selection fraction must be in (0, 1], got {fraction}"
        )));
    }
    // The guard keeps products like 0.3·10 = 3.0000000000000004 from rounding up.
    let k = (fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(n))
}

/// Indices of the `ceil(fraction·N)` largest sums; ties go to the lower index.
pub fn select_top_tokens<T: Scalar>(imp: &TokenImportance<T>, fraction: f64) -> Result<SelectedTokens> {
    let n = imp.sums.len();
    if n == 0 {
        return Err(Error::Config("cannot select from zero tokens".into()));
    }
    let k = top_k_count(fraction, n)?;
    if k < 2 {
        tracing::warn!(k, n, "top-k selection keeps fewer than two tokens");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        imp.sums[b]
            .partial_cmp(&imp.sums[a])
            .expect("finite sums")
            .then(a.cmp(&b))
    });
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    Ok(SelectedTokens { indices, fraction })
}

fn samples<T: Scalar>(x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    match x.rank() {
        2 => Ok(vec![x.clone()]),
        3 => (0..x.batch()).map(|b| x.sample(b)).collect(),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "activations must be N×C or B×N×C".into(),
        }),
    }
}

/// `x_stat_c = max_{i∈I} |X_{i,c}|`, pooled by elementwise max over samples.
pub fn x_stat_from_tokens<T: Scalar>(x: &Tensor<T>, sel: &SelectedTokens) -> Result<Vec<T>> {
    if sel.indices.is_empty() {
        return Err(Error::Config("empty token selection".into()));
    }
    let xs = samples(x)?;
    let n = xs[0].rows();
    if let Some(&bad) = sel.indices.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!(
            "selected token {bad} out of range for {n} tokens"
        )));
    }
    let mut out = vec![T::zero(); x.cols()];
    for s in &xs {
        for &i in &sel.indices {
            for (o, &v) in out.iter_mut().zip(s.row(i)) {
                *o = o.max(v.abs());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineStat {
    Mean,
    Max,
}

/// Per-channel mean or max of `|x|` over every token of every sample.
pub fn x_stat_baselines<T: Scalar>(x: &Tensor<T>, mode: BaselineStat) -> Result<Vec<T>> {
    if x.rank() < 2 || x.rows() == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "x_stat needs at least one token row".into(),
        });
    }
    Ok(match mode {
        BaselineStat::Max => x.channel_absmax(),
        BaselineStat::Mean => {
            let mut acc = vec![T::zero(); x.cols()];
            for row in x.row_iter() {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.abs();
                }
            }
            let inv = T::one() / T::of(x.rows() as f64);
            acc.into_iter().map(|a| a * inv).collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapOptions {
    pub fraction: f64,
    /// Maximum token rows per table; `None` keeps every token.
    pub token_budget: Option<usize>,
    /// Number of channel columns; `None` keeps every channel.
    pub channel_budget: Option<usize>,
    pub seed: u64,
}

impl Default for HeatmapOptions {
    fn default() -> Self {
        Self {
            fraction: DEFAULT_FRACTION,
            token_budget: None,
            channel_budget: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub token: usize,
    /// `text`, `visual`, or `mixed` when samples disagree at this position.
    pub modality: String,
    pub sum: f64,
    /// Batch-mean `|g|` per sampled channel.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapTable {
    pub channels: Vec<usize>,
    pub rows: Vec<HeatmapRow>,
}

impl HeatmapTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["token".to_string(), "modality".to_string(), "sum".to_string()];
        header.extend(self.channels.iter().map(|c| format!("c{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.token.to_string(), r.modality.clone(), format!("{:e}", r.sum)];
            rec.extend(r.values.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
    }

    /// Share of rows whose `sum < rel · reference_max`.
    pub fn near_zero_fraction(&self, reference_max: f64, rel: f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let z = self.rows.iter().filter(|r| r.sum < rel * reference_max).count();
        z as f64 / self.rows.len() as f64
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Malformed(format!("csv: {e}"))
}

/// Token-gradient heatmap before and after Top-K selection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub layer: usize,
    pub pre: HeatmapTable,
    pub post: HeatmapTable,
    /// Largest importance sum over all positions.
    pub max_sum: f64,
}

impl Heatmap {
    /// Near-zero share (`sum < 1e-6·max`) of the pre and post tables.
    pub fn near_zero_fractions(&self) -> (f64, f64) {
        (
            self.pre.near_zero_fraction(self.max_sum, 1e-6),
            self.post.near_zero_fraction(self.max_sum, 1e-6),
        )
    }
}

fn position_modality(modality: &[Modality], batch: usize, n: usize, pos: usize) -> &'static str {
    let first = modality[pos];
    if (1..batch).all(|b| modality[b * n + pos] == first) {
        first.name()
    } else {
        "mixed"
    }
}

/// Keeps at most `budget` tokens, splitting the budget between modalities in
/// proportion to their counts.
fn subsample(tokens: &[usize], tags: &[&'static str], budget: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let budget = match budget {
        Some(b) if b < tokens.len() => b,
        _ => return tokens.to_vec(),
    };
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for &t in tokens {
        match groups.iter_mut().find(|(k, _)| *k == tags[t]) {
            Some((_, g)) => g.push(t),
            None => groups.push((tags[t], vec![t])),
        }
    }
    let total = tokens.len() as f64;
    let mut out = Vec::with_capacity(budget);
    let mut left = budget;
    for (i, (_, g)) in groups.iter().enumerate() {
        let want = if i + 1 == groups.len() {
            left
        } else {
            ((g.len() as f64 / total) * budget as f64).round() as usize
        }
        .min(g.len())
        .min(left);
        left -= want;
        out.extend(rng.sample_indices(g.len(), want).into_iter().map(|j| g[j]));
    }
    out.sort_unstable();
    out
}

/// Builds the heatmap for one layer from its `B×N×C` input gradients and the
/// per-token modality tags (sample-major, length `B·N`).
pub fn heatmap<T: Scalar>(
    grads: &Tensor<T>,
    modality: &[Modality],
    layer: usize,
    opts: &HeatmapOptions,
) -> Result<Heatmap> {
    let grads = if grads.rank() == 2 {
        grads.reshape(vec![1, grads.shape()[0], grads.shape()[1]])?
    } else {
        grads.clone()
    };
    let (b, n, c) = (grads.shape()[0], grads.shape()[1], grads.shape()[2]);
    if modality.len() != b * n {
        return Err(Error::DimensionInconsistency(format!(
            "{} modality tags for {} tokens",
            modality.len(),
            b * n
        )));
    }
    let imp = token_importance_batched(&grads, layer)?;
    let sel = select_top_tokens(&imp, opts.fraction)?;
    let mut rng = Rng::new(opts.seed);
    let channels = match opts.channel_budget {
        Some(k) if k < c => rng.sample_indices(c, k),
        _ => (0..c).collect(),
    };
    let tags: Vec<&'static str> = (0..n).map(|p| position_modality(modality, b, n, p)).collect();
    let inv_b = 1.0 / b as f64;
    let row_for = |pos: usize| HeatmapRow {
        token: pos,
        modality: tags[pos].to_string(),
        sum: imp.sums[pos].widen(),
        values: channels
            .iter()
            .map(|&ch| {
                (0..b)
                    .map(|s| grads.data()[(s * n + pos) * c + ch].abs().widen())
                    .sum::<f64>()
                    * inv_b
            })
            .collect(),
    };
    let all: Vec<usize> = (0..n).collect();
    let pre_tokens = subsample(&all, &tags, opts.token_budget, &mut rng);
    let post_tokens = subsample(&sel.indices, &tags, opts.token_budget, &mut rng);
    let max_sum = imp.sums.iter().fold(0.0f64, |m, v| m.max(v.widen()));
    let pre_rows = pre_tokens.into_iter().map(row_for).collect();
    let post_rows = post_tokens.into_iter().map(row_for).collect();
    Ok(Heatmap {
        layer,
        pre: HeatmapTable {
            channels: channels.clone(),
            rows: pre_rows,
        },
        post: HeatmapTable {
            channels,
            rows: post_rows,
        },
        max_sum,
    })
}
