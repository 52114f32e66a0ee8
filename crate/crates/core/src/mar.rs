//! Masked-autoregressive training and decoding over patch grids.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::latent::{MaskPlane, PatchGrid};
use crate::mllm::{Mllm, Routing, SegmentInput};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Truncated normal sampler for per-sample mask ratios.
#[derive(Clone, Debug)]
pub struct MaskRatioSampler {
    pub mean: f64,
    pub std: f64,
    pub low: f64,
    pub high: f64,
    rng: ChaCha8Rng,
}

impl MaskRatioSampler {
    /// Mean 1.0, standard deviation 0.25, support `[0.7, 1.0]`.
    pub fn new(seed: u64) -> Self {
        Self::with_params(1.0, 0.25, 0.7, 1.0, seed)
    }

    pub fn with_params(mean: f64, std: f64, low: f64, high: f64, seed: u64) -> Self {
        assert!(low <= high && std >= 0.0, "invalid truncated normal parameters");
        Self { mean, std, low, high, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Rejection-samples `N(mean, std²)` until a draw lands in `[low, high]`.
    /// A zero `std` degenerates to the clamped mean.
    pub fn sample(&mut self) -> f64 {
        let mut rng = self.rng.clone();
        let r = self.sample_with(&mut rng);
        self.rng = rng;
        r
    }

    /// Same distribution, drawing from an external generator.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.std == 0.0 {
            return self.mean.clamp(self.low, self.high);
        }
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = self.mean + self.std * z;
            if (self.low..=self.high).contains(&x) {
                return x;
            }
        }
    }
}

/// Number of cells masked for a ratio: `round(ratio · n)`, at least one.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    ((ratio * n_tokens as f64).round() as usize).clamp(1, n_tokens)
}

/// Uniformly random subset of `masked_count(n_tokens, ratio)` cells, sorted.
pub fn sample_training_mask<R: Rng + ?Sized>(rng: &mut R, n_tokens: usize, ratio: f64) -> Result<Vec<usize>> {
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty grid".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let mut picked = index::sample(rng, n_tokens, masked_count(n_tokens, ratio)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Mean squared error over masked cells and all channels.
pub fn masked_mse_loss(pred: &PatchGrid, target: &PatchGrid, mask_set: &[usize]) -> Result<f64> {
    if (pred.dim(), pred.height(), pred.width()) != (target.dim(), target.height(), target.width()) {
        return shape_err("prediction and target grids differ in shape");
    }
    let mut g = Graph::inference();
    let p = g.constant(pred.tokens().clone());
    let loss = masked_mse(&mut g, p, target.tokens(), mask_set)?;
    Ok(g.value(loss).data()[0])
}

/// Masked MSE on the tape: `pred` and `target` are `[cells, d]`.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Tensor, mask_set: &[usize]) -> Result<Var> {
    if mask_set.is_empty() {
        return Err(Error::InvalidArgument("masked MSE over an empty mask set".into()));
    }
    if g.value(pred).shape() != target.shape() {
        return shape_err(format!("pred {:?} vs target {:?}", g.value(pred).shape(), target.shape()));
    }
    if let Some(&bad) = mask_set.iter().find(|&&i| i >= target.rows()) {
        return Err(Error::InvalidArgument(format!("mask index {bad} outside {} cells", target.rows())));
    }
    let picked = g.select_rows(pred, mask_set)?;
    let mut t = Tensor::zeros(mask_set.len(), target.cols());
    for (r, &i) in mask_set.iter().enumerate() {
        t.row_mut(r).copy_from_slice(target.row(i));
    }
    g.mse_const(picked, t)
}

/// Ordered partition of grid cells into unmasking steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceSchedule {
    pub cells: usize,
    pub steps: Vec<Vec<usize>>,
}

impl InferenceSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.steps.iter().map(Vec::len).collect()
    }

    /// Checks disjointness, coverage and non-empty steps.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.cells];
        for (k, step) in self.steps.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::InvalidArgument(format!("schedule step {k} is empty")));
            }
            for &c in step {
                if c >= self.cells || seen[c] {
                    return Err(Error::InvalidArgument(format!("cell {c} repeated or out of range")));
                }
                seen[c] = true;
            }
        }
        if self.steps.is_empty() || seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("schedule does not cover every cell".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.steps)?)
    }

    pub fn from_json(cells: usize, s: &str) -> Result<Self> {
        let schedule = Self { cells, steps: serde_json::from_str(s)? };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Per-step reveal counts following the cosine masking curve: the masked
/// fraction after step `s` of `k` is `cos(π/2 · s/k)`. Sizes are at least
/// one, nondecreasing, and sum to `n`.
pub fn cosine_step_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("{k} decoding steps for {n} cells")));
    }
    let masked_after = |s: usize| n as f64 * (FRAC_PI_2 * s as f64 / k as f64).cos();
    let ideal: Vec<f64> = (1..=k).map(|s| masked_after(s - 1) - masked_after(s)).collect();
    let mut sizes: Vec<usize> = ideal.iter().map(|r| (r.floor() as usize).max(1)).collect();
    let mut total: usize = sizes.iter().sum();
    // Too many: shrink the leftmost entry of the largest run.
    while total > n {
        let max = *sizes.iter().max().expect("k >= 1");
        let i = sizes.iter().position(|&s| s == max).expect("max exists");
        sizes[i] -= 1;
        total -= 1;
    }
    // Too few: grow where the ideal exceeds the allocation most, among
    // positions whose increment keeps the sequence nondecreasing.
    while total < n {
        let i = (0..k)
            .filter(|&i| i + 1 == k || sizes[i] < sizes[i + 1])
            .max_by(|&a, &b| {
                let ra = ideal[a] - sizes[a] as f64;
                let rb = ideal[b] - sizes[b] as f64;
                ra.total_cmp(&rb).then(a.cmp(&b))
            })
            .expect("last position always qualifies");
        sizes[i] += 1;
        total += 1;
    }
    Ok(sizes)
}

/// Random generation order split into `steps` sets sized by [`cosine_step_sizes`].
pub fn build_inference_schedule<R: Rng + ?Sized>(rng: &mut R, n_tokens: usize, steps: usize) -> Result<InferenceSchedule> {
    let sizes = cosine_step_sizes(n_tokens, steps)?;
    let order = index::sample(rng, n_tokens, n_tokens).into_vec();
    let mut out = Vec::with_capacity(steps);
    let mut at = 0;
    for s in sizes {
        out.push(order[at..at + s].to_vec());
        at += s;
    }
    Ok(InferenceSchedule { cells: n_tokens, steps: out })
}

/// Anything that predicts every grid cell from a partially masked grid.
pub trait MaskedPredictor {
    /// `grid` holds clean values where `mask` is false; entries under the
    /// mask are ignored. Returns predictions for all cells, `[cells, d]`.
    fn predict(&self, text: &[usize], grid: &Tensor, mask: &MaskPlane) -> Result<Tensor>;
}

/// The branched MLLM as a [`MaskedPredictor`]: `[Text, ImgG]` through the
/// generation branch and vision head.
pub struct BranchPredictor<'a> {
    pub model: &'a Mllm,
    pub store: &'a ParamStore,
}

impl MaskedPredictor for BranchPredictor<'_> {
    fn predict(&self, text: &[usize], grid: &Tensor, mask: &MaskPlane) -> Result<Tensor> {
        let mut g = Graph::inference();
        let grid_var = g.constant(grid.clone());
        let img = self.model.masked_grid_input(&mut g, self.store, grid_var, mask)?;
        let out = self.model.forward(
            &mut g,
            self.store,
            &[SegmentInput::Text(text.to_vec()), SegmentInput::ImgG(img)],
            Routing::Branched,
        )?;
        Ok(g.value(out.vision.expect("ImgG segment present")).clone())
    }
}

/// Starts fully masked and, for each schedule step, writes the predictor's
/// outputs into that step's cells, which are clean from then on.
pub fn mar_generate<P: MaskedPredictor + ?Sized>(
    predictor: &P,
    text: &[usize],
    schedule: &InferenceSchedule,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
) -> Result<PatchGrid> {
    let n = grid_h * grid_w;
    if schedule.cells != n {
        return shape_err(format!("schedule over {} cells for a {grid_h}x{grid_w} grid", schedule.cells));
    }
    schedule.validate()?;
    let mut grid = Tensor::zeros(n, dim);
    let mut mask = MaskPlane { height: grid_h, width: grid_w, masked: vec![true; n] };
    for step in &schedule.steps {
        let pred = predictor.predict(text, &grid, &mask)?;
        if pred.shape() != (n, dim) {
            return shape_err(format!("predictor returned {:?}", pred.shape()));
        }
        for &c in step {
            grid.row_mut(c).copy_from_slice(pred.row(c));
            mask.masked[c] = false;
        }
    }
    PatchGrid::new(grid_h, grid_w, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_samples_stay_in_bounds() {
        let mut s = MaskRatioSampler::new(11);
        for _ in 0..10_000 {
            let r = s.sample();
            assert!((0.7..=1.0).contains(&r));
        }
        let mut degenerate = MaskRatioSampler::with_params(1.0, 0.0, 0.7, 1.0, 0);
        assert!((0..10).all(|_| degenerate.sample() == 1.0));
    }

    #[test]
    fn ratio_sample_mean_matches_truncated_normal_mean() {
        use statrs::distribution::{Continuous, ContinuousCDF, Normal};
        let n = Normal::standard();
        let (mu, sigma, a, b) = (1.0, 0.25, 0.7, 1.0);
        let (alpha, beta) = ((a - mu) / sigma, (b - mu) / sigma);
        let analytic = mu + sigma * (n.pdf(alpha) - n.pdf(beta)) / (n.cdf(beta) - n.cdf(alpha));
        assert!((analytic - 0.867).abs() < 5e-4, "{analytic}");
        let mut s = MaskRatioSampler::new(5);
        let draws = 200_000;
        let mean = (0..draws).map(|_| s.sample()).sum::<f64>() / draws as f64;
        // Truncated std is about 0.083, so the standard error is about 2e-4.
        assert!((mean - analytic).abs() < 1e-3, "{mean} vs {analytic}");
    }

    #[test]
    fn training_mask_sizes_follow_rounding_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_training_mask(&mut rng, 64, 1.0).unwrap(), (0..64).collect::<Vec<_>>());
        // 0.7 * 64 = 44.8 rounds to 45.
        assert_eq!(sample_training_mask(&mut rng, 64, 0.7).unwrap().len(), 45);
        assert_eq!(sample_training_mask(&mut rng, 64, 0.001).unwrap().len(), 1);
        assert!(sample_training_mask(&mut rng, 0, 0.5).is_err());
        assert!(sample_training_mask(&mut rng, 8, 0.0).is_err());
        assert!(sample_training_mask(&mut rng, 8, 1.5).is_err());
    }

    #[test]
    fn training_masks_from_different_seeds_differ() {
        // P(two uniform 45-of-64 subsets coincide) = 1 / C(64, 45) ~ 1e-16.
        let collisions = (0..200u64)
            .filter(|&s| {
                let a = sample_training_mask(&mut ChaCha8Rng::seed_from_u64(2 * s), 64, 0.7).unwrap();
                let b = sample_training_mask(&mut ChaCha8Rng::seed_from_u64(2 * s + 1), 64, 0.7).unwrap();
                a == b
            })
            .count();
        assert_eq!(collisions, 0);
    }

    #[test]
    fn masked_mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = PatchGrid::new(4, 4, Tensor::randn(16, 16, 1.0, &mut rng)).unwrap();
        assert_eq!(masked_mse_loss(&t, &t, &[0, 3]).unwrap(), 0.0);
        let mut p = t.clone().into_tokens();
        p.set(5, 0, p.get(5, 0) + 1.0);
        let p = PatchGrid::new(4, 4, p).unwrap();
        assert_eq!(masked_mse_loss(&p, &t, &[5]).unwrap(), 1.0 / 16.0);
        assert!(masked_mse_loss(&p, &t, &[]).is_err());
    }

    #[test]
    fn masked_mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PatchGrid::new(4, 4, Tensor::randn(16, 5, 1.0, &mut rng)).unwrap();
        let t = PatchGrid::new(4, 4, Tensor::randn(16, 5, 1.0, &mut rng)).unwrap();
        let set = [1usize, 2, 9, 15];
        let mut acc = 0.0;
        for &c in &set {
            for ch in 0..5 {
                let e = p.cell(c)[ch] - t.cell(c)[ch];
                acc += e * e;
            }
        }
        let oracle = acc / (set.len() * 5) as f64;
        assert!((masked_mse_loss(&p, &t, &set).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn masked_mse_gradient_is_zero_off_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::inference();
        let p = g.variable(Tensor::randn(16, 4, 1.0, &mut rng));
        let t = Tensor::randn(16, 4, 1.0, &mut rng);
        let set = [0usize, 7, 8];
        let loss = masked_mse(&mut g, p, &t, &set).unwrap();
        let grad = g.backward(loss).unwrap().get(p, &g);
        for c in 0..16 {
            let nz = grad.row(c).iter().any(|&v| v != 0.0);
            assert_eq!(nz, set.contains(&c), "cell {c}");
        }
    }

    #[test]
    fn schedule_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = build_inference_schedule(&mut rng, 64, 1).unwrap();
        assert_eq!(one.sizes(), vec![64]);
        let all = build_inference_schedule(&mut rng, 64, 64).unwrap();
        assert!(all.sizes().iter().all(|&s| s == 1));
        all.validate().unwrap();
        let eight = build_inference_schedule(&mut rng, 64, 8).unwrap();
        let sizes = eight.sizes();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 64);
        eight.validate().unwrap();
        assert!(build_inference_schedule(&mut rng, 64, 0).is_err());
        assert!(build_inference_schedule(&mut rng, 4, 5).is_err());
        let json = eight.to_json().unwrap();
        assert_eq!(InferenceSchedule::from_json(64, &json).unwrap(), eight);
    }

    proptest! {
        #[test]
        fn cosine_sizes_are_a_monotone_partition(n in 1usize..300, kf in 0.0f64..1.0) {
            let k = 1 + ((n - 1) as f64 * kf) as usize;
            let sizes = cosine_step_sizes(n, k).unwrap();
            prop_assert_eq!(sizes.len(), k);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().all(|&s| s >= 1));
            prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    /// Linear toy predictor: every cell predicts `w · mean(clean cells) + b_c`
    /// with `b_c` a per-cell offset.
    struct LinearToy {
        w: f64,
        offsets: Vec<[f64; 2]>,
    }

    impl MaskedPredictor for LinearToy {
        fn predict(&self, _text: &[usize], grid: &Tensor, mask: &MaskPlane) -> Result<Tensor> {
            let clean: Vec<usize> = (0..grid.rows()).filter(|&i| !mask.masked[i]).collect();
            let mut mean = [0.0; 2];
            for &c in &clean {
                mean[0] += grid.get(c, 0) / clean.len() as f64;
                mean[1] += grid.get(c, 1) / clean.len() as f64;
            }
            let mut out = Tensor::zeros(grid.rows(), 2);
            for (i, off) in self.offsets.iter().enumerate() {
                out.set(i, 0, self.w * mean[0] + off[0]);
                out.set(i, 1, self.w * mean[1] + off[1]);
            }
            Ok(out)
        }
    }

    #[test]
    fn sequential_generation_matches_hand_rollout() {
        let toy = LinearToy { w: 0.5, offsets: vec![[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [4.0, -2.0]] };
        let schedule = InferenceSchedule { cells: 4, steps: vec![vec![2], vec![0], vec![3], vec![1]] };
        let out = mar_generate(&toy, &[0], &schedule, 2, 2, 2).unwrap();
        // Step 1: nothing clean, cell 2 <- offset (-1, 1).
        // Step 2: mean = (-1, 1); cell 0 <- (0.5*-1 + 1, 0.5*1 + 0) = (0.5, 0.5).
        // Step 3: mean = (-0.25, 0.75); cell 3 <- (-0.125 + 4, 0.375 - 2) = (3.875, -1.625).
        // Step 4: mean = (3.875 - 0.5 + 1 ... ) computed below.
        let m3 = [(-1.0 + 0.5 + 3.875) / 3.0, (1.0 + 0.5 - 1.625) / 3.0];
        let expect = [[0.5, 0.5], [0.5 * m3[0], 0.5 * m3[1] + 2.0], [-1.0, 1.0], [3.875, -1.625]];
        for (c, e) in expect.iter().enumerate() {
            assert!((out.cell(c)[0] - e[0]).abs() < 1e-12 && (out.cell(c)[1] - e[1]).abs() < 1e-12, "cell {c}");
        }
    }

    #[test]
    fn single_step_generation_is_one_prediction() {
        let toy = LinearToy { w: 3.0, offsets: vec![[1.0, 2.0], [3.0, 4.0]] };
        let schedule = InferenceSchedule { cells: 2, steps: vec![vec![1, 0]] };
        let out = mar_generate(&toy, &[0], &schedule, 1, 2, 2).unwrap();
        assert_eq!(out.tokens().data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = InferenceSchedule { cells: 3, steps: vec![vec![0, 1, 2]] };
        assert!(mar_generate(&toy, &[0], &bad, 1, 2, 2).is_err());
    }
}
