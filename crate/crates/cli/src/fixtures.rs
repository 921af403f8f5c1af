//! Synthetic models and calibration sets.
//!
//! Models are `depth` blocks of `rmsnorm → linear → relu`. A few outlier
//! channels get a 50× RMSNorm gain and 1/50× weight columns, so activations
//! carry the outliers while the FP function stays balanced. The first linear
//! layer annihilates `(e_a − e_b)/√2` for pairs of ordinary "null" channels,
//! which shows up as identical weight columns.
//!
//! Visual tokens of a calibration set point along that subspace: they are
//! nearly identical, large on the null channels where text is small, and the
//! negative bias keeps every unit they reach inactive, so their gradients
//! vanish.

use anyhow::{bail, ensure, Context, Result};
use tlq_core::model::{
    backward_token_grads, forward_fp, Activation, LayerKind, LayerSpec, LayerStack, Modality, ProxyLoss,
};
use tlq_core::rng::Rng;
use tlq_core::{CalibSet64, LayerStack64, Tensor64};

/// Gain ratio above which a channel of the first RMSNorm counts as planted.
const OUTLIER_DETECT_RATIO: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFixture {
    pub seed: u64,
    pub depth: usize,
    pub channels: usize,
    pub outlier_fraction: f64,
    pub outlier_gain: f64,
    /// Ordinary channels paired into the first layer's null space; even.
    pub null_channels: usize,
    /// Mean bias of every linear layer.
    pub bias: f64,
}

impl Default for ModelFixture {
    fn default() -> Self {
        Self {
            seed: 0,
            depth: 2,
            channels: 64,
            outlier_fraction: 0.0625,
            outlier_gain: 50.0,
            null_channels: 2,
            bias: -0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibFixture {
    pub seed: u64,
    pub batch: usize,
    pub tokens: usize,
    pub visual_fraction: f64,
    /// Target pairwise cosine similarity of visual tokens.
    pub redundancy: f64,
    /// Visual row norm relative to a typical text row.
    pub visual_magnitude: f64,
}

impl Default for CalibFixture {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 128,
            tokens: 32,
            visual_fraction: 0.8,
            redundancy: 0.99,
            visual_magnitude: 4.0,
        }
    }
}

fn outlier_count(channels: usize, fraction: f64) -> usize {
    let m = (fraction * channels as f64).round() as usize;
    if fraction > 0.0 {
        m.clamp(1, channels)
    } else {
        0
    }
}

/// Orthonormal directions `(e_a − e_b)/√2` over consecutive pairs of
/// `paired`.
pub fn null_directions(channels: usize, paired: &[usize]) -> Vec<Vec<f64>> {
    paired
        .chunks_exact(2)
        .map(|p| {
            let mut u = vec![0.0; channels];
            u[p[0]] = std::f64::consts::FRAC_1_SQRT_2;
            u[p[1]] = -std::f64::consts::FRAC_1_SQRT_2;
            u
        })
        .collect()
}

pub fn generate_model(spec: &ModelFixture) -> Result<LayerStack64> {
    ensure!(spec.depth >= 1, "depth must be at least 1");
    ensure!(spec.channels >= 2, "channels must be at least 2");
    ensure!(
        (0.0..=1.0).contains(&spec.outlier_fraction),
        "outlier_fraction must be in [0, 1]"
    );
    ensure!(spec.outlier_gain >= 1.0, "outlier_gain must be at least 1");
    ensure!(spec.null_channels.is_multiple_of(2), "null_channels must be even");
    let c = spec.channels;
    let n_out = outlier_count(c, spec.outlier_fraction);
    ensure!(
        n_out + spec.null_channels <= c,
        "outlier and null channels exceed the width"
    );
    let mut rng = Rng::new(spec.seed);
    let picked = rng.sample_indices(c, n_out + spec.null_channels);
    let mut outliers = picked[..n_out].to_vec();
    outliers.sort_unstable();
    let null = null_directions(c, &picked[n_out..]);
    let std = 1.0 / (c as f64).sqrt();
    let mut layers = Vec::with_capacity(3 * spec.depth);
    for b in 0..spec.depth {
        let gain: Vec<f64> = (0..c)
            .map(|j| rng.uniform(0.8, 1.2) * if outliers.contains(&j) { spec.outlier_gain } else { 1.0 })
            .collect();
        let mut w = vec![0.0; c * c];
        for (k, v) in w.iter_mut().enumerate() {
            let col = k % c;
            *v = rng.normal(0.0, std)
                / if outliers.contains(&col) {
                    spec.outlier_gain
                } else {
                    1.0
                };
        }
        if b == 0 {
            for row in w.chunks_mut(c) {
                for u in &null {
                    let dot: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (a, &uj) in row.iter_mut().zip(u) {
                        *a -= dot * uj;
                    }
                }
            }
        }
        let bias = (0..c).map(|_| spec.bias + rng.normal(0.0, 0.05)).collect();
        layers.push(LayerSpec::rmsnorm(format!("norm{b}"), gain, 1e-5)?);
        layers.push(LayerSpec::linear(
            format!("fc{b}"),
            Tensor64::new(vec![c, c], w)?,
            bias,
        )?);
        layers.push(LayerSpec::act(format!("act{b}"), Activation::Relu));
    }
    Ok(LayerStack::new(c, layers)?)
}

fn first_block(stack: &LayerStack64) -> Result<(&[f64], &Tensor64)> {
    match (
        stack.layers().first().map(|l| &l.kind),
        stack.layers().get(1).map(|l| &l.kind),
    ) {
        (Some(LayerKind::RmsNorm { gain, .. }), Some(LayerKind::Linear { weight, .. })) => Ok((gain, weight)),
        _ => bail!("model must start with rmsnorm → linear"),
    }
}

/// Channel pairs `(a, b)` whose first-linear weight columns coincide.
pub fn planted_null_pairs(stack: &LayerStack64) -> Result<Vec<(usize, usize)>> {
    let (_, w) = first_block(stack)?;
    let c = w.shape()[1];
    let col = |j: usize| w.row_iter().map(move |r| r[j]);
    let scale = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut used = vec![false; c];
    let mut pairs = Vec::new();
    for a in 0..c {
        if used[a] {
            continue;
        }
        if let Some(b) =
            (a + 1..c).find(|&b| !used[b] && col(a).zip(col(b)).all(|(x, y)| (x - y).abs() <= 1e-12 * scale))
        {
            used[a] = true;
            used[b] = true;
            pairs.push((a, b));
        }
    }
    Ok(pairs)
}

/// Channels whose first-block gain exceeds 10× the median gain.
pub fn planted_outliers(stack: &LayerStack64) -> Result<Vec<usize>> {
    let (gain, _) = first_block(stack)?;
    let mut sorted: Vec<f64> = gain.iter().map(|g| g.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok((0..gain.len())
        .filter(|&j| gain[j].abs() > OUTLIER_DETECT_RATIO * median)
        .collect())
}

pub fn generate_calib(spec: &CalibFixture, model: &LayerStack64) -> Result<CalibSet64> {
    ensure!(
        (0.0..=1.0).contains(&spec.visual_fraction),
        "visual_fraction must be in [0, 1]"
    );
    ensure!(
        spec.redundancy > 0.0 && spec.redundancy < 1.0,
        "redundancy must be in (0, 1)"
    );
    ensure!(spec.batch >= 1 && spec.tokens >= 1, "batch and tokens must be positive");
    let c = model.input_channels();
    let n_vis = (spec.visual_fraction * spec.tokens as f64).round() as usize;
    let mut rng = Rng::with_stream(spec.seed, 1);

    let mut direction = vec![0.0; c];
    if n_vis > 0 {
        let (gain, weight) = first_block(model)?;
        let paired: Vec<usize> = planted_null_pairs(model)?
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        let null = null_directions(c, &paired);
        ensure!(!null.is_empty(), "model has no planted null space for visual tokens");
        let coeffs: Vec<f64> = null.iter().map(|_| rng.normal(0.0, 1.0)).collect();
        let norm = coeffs.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let v: Vec<f64> = (0..c)
            .map(|j| null.iter().zip(&coeffs).map(|(u, a)| u[j] * a).sum::<f64>() / norm)
            .collect();
        let residual = weight
            .row_iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max);
        ensure!(
            residual < 1e-9,
            "first linear layer does not annihilate the visual direction"
        );
        direction = v.iter().zip(gain).map(|(x, g)| x / g).collect();
        let dn = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        direction.iter_mut().for_each(|x| *x /= dn);
    }
    // Two rows s + n₁, s + n₂ have cosine ≈ 1 / (1 + ρ²) with ρ = |n|/|s|.
    let rho = ((1.0 / spec.redundancy - 1.0) / 4.0).sqrt();
    let text_norm = (c as f64).sqrt();
    let mut data = Vec::with_capacity(spec.batch * spec.tokens * c);
    let mut modality = Vec::with_capacity(spec.batch * spec.tokens);
    for _ in 0..spec.batch {
        let a = spec.visual_magnitude * text_norm * rng.uniform(0.75, 1.25);
        let sigma = rho * a / text_norm;
        for n in 0..spec.tokens {
            if n < n_vis {
                data.extend(direction.iter().map(|&d| a * d + rng.normal(0.0, sigma)));
                modality.push(Modality::Visual);
            } else {
                data.extend((0..c).map(|_| rng.normal(0.0, 1.0)));
                modality.push(Modality::Text);
            }
        }
    }
    Ok(CalibSet64::new(
        Tensor64::new(vec![spec.batch, spec.tokens, c], data)?,
        modality,
    )?)
}

/// Measurements behind the fixture self-checks.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureCheck {
    /// Smallest outlier-channel absmax over the median channel absmax of the
    /// first layer's output.
    pub outlier_absmax_ratio: f64,
    /// Mean per-token gradient magnitude at the first linear input, visual
    /// over text.
    pub visual_text_grad_ratio: f64,
    /// Smallest pairwise cosine among the visual tokens of sample 0.
    pub min_visual_cosine: f64,
}

pub fn check_fixture(model: &LayerStack64, calib: &CalibSet64) -> Result<FixtureCheck> {
    let outliers = planted_outliers(model)?;
    let trace = forward_fp(model, calib.data())?;
    let absmax = trace.input(1).channel_absmax();
    let mut sorted = absmax.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2].max(f64::MIN_POSITIVE);
    let outlier_absmax_ratio = outliers
        .iter()
        .map(|&j| absmax[j] / median)
        .fold(f64::INFINITY, f64::min);

    let lin = *model.linear_indices().first().context("model has no linear layer")?;
    let (mut vis, mut txt) = ((0.0, 0usize), (0.0, 0usize));
    for b in 0..calib.batch() {
        let grads = backward_token_grads(
            model,
            &calib.sample(b)?,
            &ProxyLoss::SumSqOutput.for_sample(b, calib.tokens()),
        )?;
        let g = grads.input_grad(lin);
        for (n, row) in g.row_iter().enumerate() {
            let m = row.iter().map(|v| v.abs()).sum::<f64>() / row.len() as f64;
            match calib.modality_at(b, n) {
                Modality::Visual => vis = (vis.0 + m, vis.1 + 1),
                Modality::Text => txt = (txt.0 + m, txt.1 + 1),
            }
        }
    }
    let mean = |(s, k): (f64, usize)| if k == 0 { 0.0 } else { s / k as f64 };
    let visual_text_grad_ratio = if txt.1 == 0 {
        0.0
    } else {
        mean(vis) / mean(txt).max(f64::MIN_POSITIVE)
    };

    let x0 = calib.sample(0)?;
    let rows: Vec<&[f64]> = (0..calib.tokens())
        .filter(|&n| calib.modality_at(0, n) == Modality::Visual)
        .map(|n| x0.row(n))
        .collect();
    let mut min_visual_cosine: f64 = 1.0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            let na = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = rows[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            min_visual_cosine = min_visual_cosine.min(dot / (na * nb));
        }
    }
    Ok(FixtureCheck {
        outlier_absmax_ratio,
        visual_text_grad_ratio,
        min_visual_cosine,
    })
}
