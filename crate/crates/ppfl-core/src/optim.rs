//! Client-side Adam with L1 update clipping and server-side FedAdam.
//!
//! The client optimizer follows the printed update exactly: moments start
//! at `m = 0`, `v = δ·1`, both bias corrections sit inside the step, and
//! the adaptivity constant `δ` is added outside the square root. State is
//! re-initialized at every federated round. The server keeps persistent
//! moments over the averaged deltas and applies them with a plus sign —
//! client deltas already point downhill — and no bias correction.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::Tape;
use crate::data::{MinibatchCursor, SampleSet};
use crate::model::{batch_loss, darnn_forward, ModelError, ModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    EmptyDataset,
    BadHyper { what: &'static str },
    /// A client delta does not match the shared-parameter length.
    DeltaLengthMismatch { expected: usize, got: usize },
    NoDeltas,
    Model(ModelError),
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::EmptyDataset => write!(f, "client dataset is empty"),
            OptimError::BadHyper { what } => write!(f, "invalid hyperparameter: {what}"),
            OptimError::DeltaLengthMismatch { expected, got } => {
                write!(f, "client delta has {got} values, shared block has {expected}")
            }
            OptimError::NoDeltas => write!(f, "server update needs at least one client delta"),
            OptimError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for OptimError {}

impl From<ModelError> for OptimError {
    fn from(e: ModelError) -> Self {
        OptimError::Model(e)
    }
}

/// Client Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub delta: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eta: 0.001, delta: 1e-8 }
    }
}

/// Server FedAdam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct FedAdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub delta: f64,
}

impl Default for FedAdamHyper {
    fn default() -> Self {
        FedAdamHyper { beta1: 0.99, beta2: 0.999, eta: 0.01, delta: 1e-8 }
    }
}

/// Client Adam moments. Fresh per federated round; persistent for solo
/// (local/pooled) training.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamState {
    pub fn new(len: usize, hyper: &AdamHyper) -> Self {
        AdamState { m: vec![0.0; len], v: vec![hyper.delta; len], step: 0 }
    }

    /// One Adam step with bias correction:
    /// `θ ← θ − η · m̂/(1−β₁ᵏ) / (√(v̂/(1−β₂ᵏ)) + δ)`.
    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64], hyper: &AdamHyper) {
        debug_assert_eq!(theta.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 / (1.0 - libm::pow(hyper.beta1, self.step as f64));
        let bc2 = 1.0 / (1.0 - libm::pow(hyper.beta2, self.step as f64));
        for ((t, g), (m, v)) in
            theta.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            *t -= hyper.eta * (*m * bc1) / (libm::sqrt(*v * bc2) + hyper.delta);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub fn second_moment_nonnegative(&self) -> bool {
        self.v.iter().all(|x| *x >= 0.0)
    }
}

/// L1 norm.
pub fn l1_norm(v: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let ch = v.chunks_exact(4);
    let rem = ch.remainder();
    for c in ch {
        lanes[0] += libm::fabs(c[0]);
        lanes[1] += libm::fabs(c[1]);
        lanes[2] += libm::fabs(c[2]);
        lanes[3] += libm::fabs(c[3]);
    }
    let mut acc = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for x in rem {
        acc += libm::fabs(*x);
    }
    acc
}

/// Rescale `delta` to L1 norm `clip` when it exceeds `clip`; otherwise
/// pass it through unchanged. Direction is preserved and the operation is
/// idempotent: the recomputed norm of a clipped vector is guaranteed to
/// be at most `clip`, so a second clip passes it through bitwise.
pub fn clip_l1(delta: &[f64], clip: f64) -> Vec<f64> {
    assert!(clip > 0.0, "clip value must be positive");
    let norm = l1_norm(delta);
    if norm <= clip {
        return delta.to_vec();
    }
    let scale = clip / norm;
    let mut out: Vec<f64> = delta.iter().map(|d| d * scale).collect();
    // Summation rounding can leave the recomputed norm a few ulps above
    // the budget; shave it below so the clip condition closes.
    let mut recomputed = l1_norm(&out);
    while recomputed > clip {
        let shrink = (clip / recomputed) * (1.0 - 1e-9);
        for v in out.iter_mut() {
            *v *= shrink;
        }
        recomputed = l1_norm(&out);
    }
    out
}

/// Per-step statistics from a training run.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub step_l1: f64,
}

/// Run `steps` minibatch Adam steps on `theta` in place, drawing batches
/// from `cursor`. Shared by the federated client update and the solo
/// baselines; the caller owns the Adam state.
#[allow(clippy::too_many_arguments)]
pub fn adam_train(
    spec: &ModelSpec,
    theta: &mut [f64],
    state: &mut AdamState,
    data: &SampleSet,
    cursor: &mut MinibatchCursor,
    steps: usize,
    batch_size: usize,
    hyper: &AdamHyper,
    tape: &mut Tape,
) -> Result<Vec<StepStats>, OptimError> {
    if data.len() == 0 {
        return Err(OptimError::EmptyDataset);
    }
    if steps == 0 {
        return Err(OptimError::BadHyper { what: "steps must be >= 1" });
    }
    if batch_size == 0 {
        return Err(OptimError::BadHyper { what: "batch size must be >= 1" });
    }
    let mut stats = Vec::with_capacity(steps);
    let mut grad = Vec::new();
    let mut indices = Vec::new();
    for _ in 0..steps {
        cursor.next_batch(batch_size, &mut indices);
        let batch = data.gather(&indices);
        tape.reset();
        let leaves = spec.push_leaves(tape, theta)?;
        let out = darnn_forward(tape, spec, &leaves, &batch)?;
        let loss = batch_loss(tape, out, &batch)?;
        let loss_value = tape.value(loss)[0];
        tape.backward(loss).map_err(ModelError::from)?;
        spec.extract_gradient(tape, &leaves, &mut grad);
        let before: Vec<f64> = theta.to_vec();
        state.apply(theta, &grad, hyper);
        let moved: f64 =
            theta.iter().zip(&before).map(|(a, b)| libm::fabs(a - b)).sum();
        stats.push(StepStats { loss: loss_value, step_l1: moved });
    }
    tape.reset();
    Ok(stats)
}

/// Result of one federated client update.
#[derive(Debug, Clone)]
pub struct ClientUpdateOutput {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// Mean minibatch loss over the local steps.
    pub train_loss: f64,
    /// L1 norm of the full θ update before clipping.
    pub delta_l1_pre: f64,
    /// L1 norm after clipping (equals `pre` when no clip fired).
    pub delta_l1_post: f64,
}

/// Federated client update: fresh Adam state, `epochs` minibatch steps on
/// `θ = [φ, ψ]`, then the full update clipped to L1 norm at most `clip`.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    spec: &ModelSpec,
    phi_prev: &[f64],
    psi_prev: &[f64],
    data: &SampleSet,
    cursor: &mut MinibatchCursor,
    epochs: usize,
    clip: f64,
    batch_size: usize,
    hyper: &AdamHyper,
    tape: &mut Tape,
) -> Result<ClientUpdateOutput, OptimError> {
    if clip <= 0.0 {
        return Err(OptimError::BadHyper { what: "clip value must be positive" });
    }
    let theta0 = spec.merge(phi_prev, psi_prev)?;
    let mut theta = theta0.clone();
    let mut state = AdamState::new(theta.len(), hyper);
    let stats =
        adam_train(spec, &mut theta, &mut state, data, cursor, epochs, batch_size, hyper, tape)?;
    let train_loss = stats.iter().map(|s| s.loss).sum::<f64>() / stats.len() as f64;

    let delta: Vec<f64> = theta.iter().zip(&theta0).map(|(a, b)| a - b).collect();
    let pre = l1_norm(&delta);
    let clipped = clip_l1(&delta, clip);
    let post = l1_norm(&clipped);
    for ((t, base), d) in theta.iter_mut().zip(&theta0).zip(&clipped) {
        *t = base + d;
    }
    let (phi, psi) = spec.partition(&theta)?;
    Ok(ClientUpdateOutput { phi, psi, train_loss, delta_l1_pre: pre, delta_l1_post: post })
}

/// Server FedAdam moments over the averaged shared-layer deltas. `v`
/// starts at zero with `δ̄` guarding the denominator; both moments persist
/// across rounds.
#[derive(Debug, Clone)]
pub struct FedAdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl FedAdamState {
    pub fn new(len: usize) -> Self {
        FedAdamState { m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub fn second_moment_nonnegative(&self) -> bool {
        self.v.iter().all(|x| *x >= 0.0)
    }
}

/// FedAdam aggregation:
/// `Δ = mean(deltas)`, `m ← β̄₁m + (1−β̄₁)Δ`, `v ← β̄₂v + (1−β̄₂)Δ²`,
/// `φ ← φ + η̄·m/(√v + δ̄)`.
/// Deltas are summed in ascending client-index order.
pub fn server_update(
    phi_prev: &[f64],
    deltas: &[Vec<f64>],
    state: &mut FedAdamState,
    hyper: &FedAdamHyper,
) -> Result<Vec<f64>, OptimError> {
    if deltas.is_empty() {
        return Err(OptimError::NoDeltas);
    }
    for d in deltas {
        if d.len() != phi_prev.len() {
            return Err(OptimError::DeltaLengthMismatch { expected: phi_prev.len(), got: d.len() });
        }
    }
    let inv_m = 1.0 / deltas.len() as f64;
    let mut avg = vec![0.0; phi_prev.len()];
    for d in deltas {
        for (a, x) in avg.iter_mut().zip(d) {
            *a += x;
        }
    }
    for a in avg.iter_mut() {
        *a *= inv_m;
    }
    let mut phi = Vec::with_capacity(phi_prev.len());
    for ((p, d), (m, v)) in
        phi_prev.iter().zip(&avg).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * d;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * d * d;
        phi.push(p + hyper.eta * *m / (libm::sqrt(*v) + hyper.delta));
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelSpec, PartitionScheme};
    use crate::rng::{substream, StreamDomain};
    use rand::Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(
            ModelDims { features: 2, window: 3, horizon: 1, hidden: 2, stack: 2, fc_hidden: 2 },
            PartitionScheme::EncoderShared,
        )
    }

    fn tiny_dataset(spec: &ModelSpec, n: usize, seed: u64) -> SampleSet {
        let mut rng = substream(seed, StreamDomain::Minibatch, 7, 7);
        let dims = &spec.dims;
        let mut set = SampleSet::with_capacity(dims.window, dims.features, n);
        for _ in 0..n {
            let x: Vec<f64> =
                (0..dims.window * dims.features).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..dims.window).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = rng.random_range(-1.0..1.0);
            set.push(&x, &y, target);
        }
        set
    }

    #[test]
    fn adam_single_step_matches_hand_evaluation() {
        // One step, gradient g: m1 = (1−β₁)g, v1 = β₂δ + (1−β₂)g²,
        // step = −η·m1(1−β₁)⁻¹ / (√(v1(1−β₂)⁻¹) + δ).
        let hyper = AdamHyper::default();
        let g = 2.0;
        let mut theta = [1.0];
        let mut state = AdamState::new(1, &hyper);
        state.apply(&mut theta, &[g], &hyper);

        let m1 = (1.0 - hyper.beta1) * g;
        let v1 = hyper.beta2 * hyper.delta + (1.0 - hyper.beta2) * g * g;
        let expect = 1.0
            - hyper.eta * (m1 / (1.0 - hyper.beta1))
                / ((v1 / (1.0 - hyper.beta2)).sqrt() + hyper.delta);
        assert!((theta[0] - expect).abs() < 1e-15, "{} vs {expect}", theta[0]);
    }

    #[test]
    fn adam_zero_gradient_takes_zero_steps() {
        let hyper = AdamHyper::default();
        let mut theta = [0.25, -0.5, 4.0];
        let mut state = AdamState::new(3, &hyper);
        for _ in 0..5 {
            state.apply(&mut theta, &[0.0; 3], &hyper);
        }
        assert_eq!(theta, [0.25, -0.5, 4.0]);
    }

    #[test]
    fn adam_moments_stay_finite_under_large_gradients() {
        let hyper = AdamHyper::default();
        let mut rng = substream(3, StreamDomain::Minibatch, 0, 0);
        let mut theta = vec![0.0; 16];
        let mut state = AdamState::new(16, &hyper);
        for _ in 0..200 {
            let grad: Vec<f64> = (0..16).map(|_| rng.random_range(-1e3..1e3)).collect();
            state.apply(&mut theta, &grad, &hyper);
        }
        assert!(state.is_finite());
        assert!(state.second_moment_nonnegative());
        assert!(theta.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn clip_within_budget_passes_through() {
        let delta = [3.0, -4.0];
        assert_eq!(clip_l1(&delta, 10.0), &[3.0, -4.0]);
    }

    #[test]
    fn clip_rescales_to_exact_budget() {
        let delta = [3.0, -4.0];
        let clipped = clip_l1(&delta, 3.5);
        assert_eq!(clipped, &[1.5, -2.0]);
        assert!((l1_norm(&clipped) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn clip_zero_vector_passes_through() {
        let delta = [0.0; 4];
        assert_eq!(clip_l1(&delta, 1.0), &[0.0; 4]);
    }

    #[test]
    fn clip_is_idempotent_and_direction_preserving() {
        let mut rng = substream(9, StreamDomain::Minibatch, 1, 1);
        for _ in 0..200 {
            let delta: Vec<f64> = (0..12).map(|_| rng.random_range(-10.0..10.0)).collect();
            let clip = rng.random_range(0.1..20.0);
            let once = clip_l1(&delta, clip);
            let twice = clip_l1(&once, clip);
            assert!(once.iter().zip(&twice).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(l1_norm(&once) <= clip + 1e-9);
            // Nonnegative scalar multiple of the input: every coordinate
            // shares one scale in [0, 1].
            let implied = l1_norm(&once) / l1_norm(&delta);
            assert!((0.0..=1.0 + 1e-15).contains(&implied));
            for (c, d) in once.iter().zip(&delta) {
                assert!((c - d * implied).abs() <= 1e-9 * d.abs().max(1.0));
            }
        }
    }

    #[test]
    fn client_update_clips_full_theta_update() {
        let spec = tiny_spec();
        let data = tiny_dataset(&spec, 8, 5);
        let mut rng = substream(5, StreamDomain::SharedInit, 0, 0);
        let phi = spec.init_shared(&mut rng);
        let psi = spec.init_personal(&mut rng);
        let mut cursor =
            MinibatchCursor::new(data.len(), substream(5, StreamDomain::Minibatch, 0, 0));
        let mut tape = Tape::new();
        // A tiny clip forces the rescale on any non-degenerate update.
        let clip = 1e-4;
        let out = client_update(
            &spec,
            &phi,
            &psi,
            &data,
            &mut cursor,
            3,
            clip,
            4,
            &AdamHyper::default(),
            &mut tape,
        )
        .unwrap();
        assert!(out.delta_l1_pre > clip);
        assert!((out.delta_l1_post - clip).abs() < 1e-12);
        let theta_new = spec.merge(&out.phi, &out.psi).unwrap();
        let theta_old = spec.merge(&phi, &psi).unwrap();
        let moved: Vec<f64> = theta_new.iter().zip(&theta_old).map(|(a, b)| a - b).collect();
        assert!(l1_norm(&moved) <= clip + 1e-9);
    }

    #[test]
    fn client_update_rejects_empty_dataset() {
        let spec = tiny_spec();
        let data = SampleSet::with_capacity(spec.dims.window, spec.dims.features, 0);
        let mut rng = substream(6, StreamDomain::SharedInit, 0, 0);
        let phi = spec.init_shared(&mut rng);
        let psi = spec.init_personal(&mut rng);
        let mut cursor = MinibatchCursor::new(0, substream(6, StreamDomain::Minibatch, 0, 0));
        let mut tape = Tape::new();
        let err = client_update(
            &spec,
            &phi,
            &psi,
            &data,
            &mut cursor,
            1,
            1.0,
            4,
            &AdamHyper::default(),
            &mut tape,
        )
        .unwrap_err();
        assert!(matches!(err, OptimError::EmptyDataset));
    }

    #[test]
    fn batch_larger_than_dataset_wraps_around() {
        let mut cursor = MinibatchCursor::new(3, substream(8, StreamDomain::Minibatch, 0, 0));
        let mut indices = Vec::new();
        cursor.next_batch(8, &mut indices);
        assert_eq!(indices.len(), 8);
        assert!(indices.iter().all(|i| *i < 3));
        // A full pass visits every sample before re-sampling it.
        let mut first_pass = indices[..3].to_vec();
        first_pass.sort_unstable();
        assert_eq!(first_pass, alloc::vec![0, 1, 2]);
    }

    #[test]
    fn server_update_averages_identical_deltas() {
        let phi = [1.0, 2.0];
        let delta = alloc::vec![0.5, -0.25];
        let deltas = alloc::vec![delta.clone(), delta.clone(), delta.clone()];
        let hyper = FedAdamHyper::default();
        let mut state = FedAdamState::new(2);
        let phi1 = server_update(&phi, &deltas, &mut state, &hyper).unwrap();
        // Average of identical deltas equals the delta itself.
        let d = 0.5;
        let m1 = (1.0 - hyper.beta1) * d;
        let v1 = (1.0 - hyper.beta2) * d * d;
        let expect = 1.0 + hyper.eta * m1 / (v1.sqrt() + hyper.delta);
        assert!((phi1[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn server_update_first_round_single_client_algebra() {
        // First round, single client, scalar delta d:
        // φ₁ = φ₀ + η̄·(1−β̄₁)d / (√((1−β̄₂)d²) + δ̄).
        let hyper = FedAdamHyper::default();
        let d = -0.75;
        let mut state = FedAdamState::new(1);
        let phi1 = server_update(&[2.0], &[alloc::vec![d]], &mut state, &hyper).unwrap();
        let expect = 2.0
            + hyper.eta * (1.0 - hyper.beta1) * d
                / (((1.0 - hyper.beta2) * d * d).sqrt() + hyper.delta);
        assert!((phi1[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn server_update_zero_delta_zero_moment_is_identity() {
        let hyper = FedAdamHyper::default();
        let mut state = FedAdamState::new(3);
        let phi = [0.5, -1.5, 3.0];
        let phi1 = server_update(&phi, &[alloc::vec![0.0; 3]], &mut state, &hyper).unwrap();
        assert_eq!(phi1, &[0.5, -1.5, 3.0]);
    }

    #[test]
    fn server_update_rejects_length_mismatch() {
        let mut state = FedAdamState::new(2);
        let err = server_update(
            &[0.0, 0.0],
            &[alloc::vec![1.0]],
            &mut state,
            &FedAdamHyper::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OptimError::DeltaLengthMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn fedadam_moments_stay_finite_under_fuzzing() {
        let hyper = FedAdamHyper::default();
        let mut rng = substream(11, StreamDomain::Minibatch, 2, 2);
        let mut state = FedAdamState::new(8);
        let mut phi = vec![0.0; 8];
        for _ in 0..300 {
            let deltas: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..8).map(|_| rng.random_range(-1e3..1e3)).collect())
                .collect();
            phi = server_update(&phi, &deltas, &mut state, &hyper).unwrap();
        }
        assert!(state.is_finite());
        assert!(state.second_moment_nonnegative());
        assert!(phi.iter().all(|x| x.is_finite()));
    }
}
