//! Segmentation, the NLL objective, Adam with global-norm clipping, and the
//! training loop.
//!
//! A batch is the full graph of one segment frame. Non-recurrent models take
//! one optimizer step per supervised frame. Recurrent models run the warmup
//! frames forward to build state, then take one step per window of
//! `bptt_window` supervised frames, backpropagating through the LSTM state
//! within the window; state crosses windows detached and is reset at segment
//! boundaries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryTable;
use crate::error::{Error, Result};
use crate::graph::{build_graph, FrameSnapshot, DEFAULT_TAU};
use crate::layers::{gmm_nll, mdn_nll_grad, GmmParams, DEFAULT_COMPONENTS};
use crate::model::{ArchDescriptor, ArchKind, Forward, ForwardCache, GraphInput, Model, RecurrentState, StateGrad, DEFAULT_DROPOUT};
use crate::numerics::{Matrix, Mode, Parameters};

/// Frames per segment (12 s at 10 Hz).
pub const SEGMENT_FRAMES: usize = 120;
/// Leading frames that only build recurrent state.
pub const WARMUP_FRAMES: usize = 20;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
pub const DEFAULT_BPTT_WINDOW: usize = 10;

/// 120 consecutive frames of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    id: usize,
    frames: Vec<FrameSnapshot>,
}

impl Segment {
    pub fn new(id: usize, frames: Vec<FrameSnapshot>) -> Result<Self> {
        if frames.len() != SEGMENT_FRAMES {
            return Err(Error::Data(format!(
                "segment {id} has {} frames, expected {SEGMENT_FRAMES}",
                frames.len()
            )));
        }
        if let Some(w) = frames.windows(2).find(|w| w[1].frame() != w[0].frame() + 1) {
            return Err(Error::Data(format!(
                "segment {id} jumps from frame {} to {}",
                w[0].frame(),
                w[1].frame()
            )));
        }
        Ok(Segment { id, frames })
    }

    /// Position of the segment in its corpus; seeds derive from it.
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn frames(&self) -> &[FrameSnapshot] {
        &self.frames
    }

    pub fn start_frame(&self) -> u32 {
        self.frames[0].frame()
    }

    /// Frame indices whose graphs feed a supervised prediction; the target of
    /// index `k` lives at `k + 1`, so no warmup frame is ever a target.
    pub fn supervised_inputs() -> std::ops::Range<usize> {
        WARMUP_FRAMES - 1..SEGMENT_FRAMES - 1
    }

    /// Next-frame acceleration for every vehicle of frame `k`, in the node
    /// order of that frame; `None` where the vehicle is gone at `k + 1`.
    pub fn targets(&self, k: usize) -> Vec<Option<f64>> {
        let next = &self.frames[k + 1];
        self.frames[k]
            .vehicles()
            .iter()
            .map(|v| next.get(v.vehicle_id).map(|n| n.a))
            .collect()
    }

    /// Vehicles present in every frame.
    pub fn persistent_vehicles(&self) -> Vec<u32> {
        let first = &self.frames[0];
        first
            .vehicles()
            .iter()
            .map(|v| v.vehicle_id)
            .filter(|&id| self.frames.iter().all(|f| f.contains(id)))
            .collect()
    }
}

/// Cuts the corpus into consecutive, non-overlapping 120-frame windows from
/// its first frame and splits them by time: the first `round(n * ratio)`
/// windows train, the rest test. No frame lands in both sets, and the split
/// involves no randomness.
pub fn segment_corpus(table: &TrajectoryTable, split_ratio: f64) -> Result<(Vec<Segment>, Vec<Segment>)> {
    if !(split_ratio > 0.0 && split_ratio <= 1.0) {
        return Err(Error::Argument(format!("split ratio {split_ratio} outside (0, 1]")));
    }
    let (first, last) = table
        .frame_span()
        .ok_or_else(|| Error::Data("empty corpus has no segments".into()))?;
    let span = (last - first + 1) as usize;
    let count = span / SEGMENT_FRAMES;
    if count == 0 {
        return Err(Error::Data(format!(
            "corpus spans {span} frames; a segment needs {SEGMENT_FRAMES}"
        )));
    }
    let used_last = first + (count * SEGMENT_FRAMES) as u32 - 1;
    let mut snaps = table.snapshots(first, used_last)?.into_iter();
    let mut segments = Vec::with_capacity(count);
    for id in 0..count {
        segments.push(Segment::new(id, snaps.by_ref().take(SEGMENT_FRAMES).collect())?);
    }
    let n_train = ((count as f64) * split_ratio).round() as usize;
    let test = segments.split_off(n_train.min(count));
    Ok((segments, test))
}

/// Mean mixture NLL over nodes.
pub fn nll_loss(outputs: &[GmmParams], targets: &[f64]) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} mixtures for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = outputs.iter().zip(targets).map(|(p, &t)| gmm_nll(p, t)).sum();
    Ok(total / outputs.len() as f64)
}

/// Mean NLL over rows with a target, and its gradient w.r.t. the raw head
/// output (zero on unsupervised rows). Returns `(loss, supervised, grad)`.
pub fn masked_nll_grad(raw: &Matrix, targets: &[Option<f64>]) -> Result<(f64, usize, Matrix)> {
    if raw.rows() != targets.len() {
        return Err(Error::Argument(format!("{} rows for {} targets", raw.rows(), targets.len())));
    }
    let n = targets.iter().flatten().count();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / n as f64;
    let mut grad = Matrix::zeros(raw.rows(), raw.cols());
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let (l, g) = mdn_nll_grad(raw.row(r), t)?;
            total += l;
            for (d, x) in grad.row_mut(r).iter_mut().zip(g) {
                *d = x * inv;
            }
        }
    }
    Ok((total * inv, n, grad))
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the scale applied (1 when untouched).
pub fn clip_gradient_norm<P: Parameters + ?Sized>(params: &mut P, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Argument(format!("clip norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0;
    let mut bad = None;
    params.visit_params(&mut |name, p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(name.to_string());
        }
        sq += p.grad.frobenius_sq();
    });
    if let Some(name) = bad {
        return Err(Error::numeric(format!("gradient of {name}")));
    }
    let norm = if sq.is_finite() {
        sq.sqrt()
    } else {
        // finite gradients whose squares overflow: rescale by the peak first
        let mut peak: f64 = 0.0;
        params.visit_params(&mut |_, p| peak = p.grad.data().iter().fold(peak, |m, x| m.max(x.abs())));
        let mut scaled = 0.0;
        params.visit_params(&mut |_, p| scaled += p.grad.data().iter().map(|x| (x / peak).powi(2)).sum::<f64>());
        peak * scaled.sqrt()
    };
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    params.visit_params_mut(&mut |_, p| p.grad.scale_in_place(scale));
    Ok(scale)
}

/// Bias-corrected Adam moments, one pair per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let mut m = Vec::new();
        params.visit_params(&mut |_, p| m.push(Matrix::zeros(p.value.rows(), p.value.cols())));
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the accumulated gradients, which are then zeroed.
pub fn adam_step<P: Parameters + ?Sized>(params: &mut P, state: &mut AdamState, lr: f64) -> Result<()> {
    let mut shapes_ok = true;
    let mut i = 0;
    params.visit_params(&mut |_, p| {
        shapes_ok &= state.m.get(i).is_some_and(|m| m.shape() == p.value.shape());
        i += 1;
    });
    if !shapes_ok || i != state.m.len() {
        return Err(Error::Argument("Adam state was built for different parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut i = 0;
    params.visit_params_mut(&mut |_, p| {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
        p.zero_grad();
        i += 1;
    });
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    pub mixture_components: usize,
    /// Graph connection range, meters.
    pub tau: f64,
    pub seed: u64,
    pub arch: ArchDescriptor,
    /// Supervised frames per truncated-BPTT window (recurrent models).
    pub bptt_window: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            epochs: 5,
            dropout: DEFAULT_DROPOUT,
            clip_norm: 5.0,
            mixture_components: DEFAULT_COMPONENTS,
            tau: DEFAULT_TAU,
            seed: 0,
            arch: ArchDescriptor::new(ArchKind::Egcn, false),
            bptt_window: DEFAULT_BPTT_WINDOW,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.mixture_components == 0 || self.bptt_window == 0 {
            return Err(Error::Config("mixture components and BPTT window must be positive".into()));
        }
        Ok(())
    }
}

/// A trained model with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub config: TrainingConfig,
    /// Mean training NLL per epoch.
    pub epoch_losses: Vec<f64>,
    pub model: Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean over supervised frames of the per-frame mean NLL.
    pub mean_nll: f64,
    pub supervised_frames: usize,
    pub optimizer_steps: usize,
    /// Steps whose gradient was clipped.
    pub clipped_steps: usize,
}

struct WindowPass {
    state: RecurrentState,
    /// Mean NLL of each supervised frame.
    losses: Vec<f64>,
    /// Train-mode passes, whose batch statistics are committed after the step.
    caches: Vec<ForwardCache>,
    /// Kink signature of the window, read by the gradient check.
    #[cfg_attr(not(test), allow(dead_code))]
    regime: u64,
}

#[derive(Default)]
struct Tally {
    loss_sum: f64,
    frames: usize,
    steps: usize,
    clipped: usize,
}

/// Stepwise trainer; [`train`] drives it over epochs.
pub struct Trainer {
    config: TrainingConfig,
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Initializes weights from `config.seed`.
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&config.arch, config.mixture_components, config.dropout, &mut rng)?;
        let adam = AdamState::new(&model);
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Graph input for one snapshot under this trainer's `tau`.
    pub fn input(&self, snapshot: &FrameSnapshot) -> Result<GraphInput> {
        self.model.prepare(&build_graph(snapshot, self.config.tau)?)
    }

    /// Train-mode loss on one frame without touching weights or statistics.
    pub fn frame_loss(&mut self, input: &GraphInput, targets: &[Option<f64>], state: Option<&RecurrentState>) -> Result<f64> {
        let fwd = self.model.forward(input, state, Mode::Train, &mut self.rng)?;
        Ok(masked_nll_grad(&fwd.raw, targets)?.0)
    }

    /// One optimizer step on a single frame of a non-recurrent model.
    /// Returns the pre-step loss.
    pub fn step_frame(&mut self, input: &GraphInput, targets: &[Option<f64>]) -> Result<f64> {
        Ok(self.step_frame_clipped(input, targets)?.0)
    }

    /// [`Trainer::step_frame`] plus whether the gradient was clipped.
    fn step_frame_clipped(&mut self, input: &GraphInput, targets: &[Option<f64>]) -> Result<(f64, bool)> {
        if self.config.arch.recurrent {
            return Err(Error::State("recurrent models train on whole segments".into()));
        }
        let fwd = self.model.forward(input, None, Mode::Train, &mut self.rng)?;
        let (loss, _, grad) = masked_nll_grad(&fwd.raw, targets)?;
        self.model.backward(&fwd.cache, &grad, None)?;
        self.model.commit_batch_stats(&fwd.cache);
        let clipped = self.finish_step()?;
        Ok((loss, clipped))
    }

    fn finish_step(&mut self) -> Result<bool> {
        let scale = clip_gradient_norm(&mut self.model, self.config.clip_norm)?;
        adam_step(&mut self.model, &mut self.adam, self.config.learning_rate)?;
        Ok(scale < 1.0)
    }

    fn run_segment(&mut self, seg: &Segment, tally: &mut Tally) -> Result<()> {
        if self.config.arch.recurrent {
            self.run_recurrent_segment(seg, tally)
        } else {
            for k in Segment::supervised_inputs() {
                let snap = &seg.frames[k];
                let targets = seg.targets(k);
                if snap.len() < 2 || targets.iter().all(Option::is_none) {
                    continue;
                }
                let input = self.input(snap)?;
                let (loss, clipped) = self.step_frame_clipped(&input, &targets)?;
                tally.loss_sum += loss;
                tally.frames += 1;
                tally.steps += 1;
                tally.clipped += usize::from(clipped);
            }
            Ok(())
        }
    }

    fn run_recurrent_segment(&mut self, seg: &Segment, tally: &mut Tally) -> Result<()> {
        let mut state = RecurrentState::new();
        for snap in &seg.frames[..WARMUP_FRAMES - 1] {
            state = self.advance_state(snap, state, false)?.0;
        }
        let inputs: Vec<usize> = Segment::supervised_inputs().collect();
        for window in inputs.chunks(self.config.bptt_window) {
            let steps: Vec<(&FrameSnapshot, Vec<Option<f64>>)> =
                window.iter().map(|&k| (&seg.frames[k], seg.targets(k))).collect();
            let pass = self.window_pass(&steps, state, true)?;
            state = pass.state;
            if pass.losses.is_empty() {
                continue;
            }
            for cache in &pass.caches {
                self.model.commit_batch_stats(cache);
            }
            let clipped = self.finish_step()?;
            tally.loss_sum += pass.losses.iter().sum::<f64>();
            tally.frames += pass.losses.len();
            tally.steps += 1;
            tally.clipped += usize::from(clipped);
        }
        Ok(())
    }

    /// Runs one truncated-BPTT window forward from `state` and, when
    /// `backprop` is set, accumulates the gradient of the mean supervised
    /// loss over the window. Gradients follow each vehicle's state by id
    /// across frames and stop at empty frames.
    fn window_pass(
        &mut self,
        steps: &[(&FrameSnapshot, Vec<Option<f64>>)],
        mut state: RecurrentState,
        backprop: bool,
    ) -> Result<WindowPass> {
        // (cache, d_raw) per frame; None at empty frames
        let mut tape: Vec<Option<(ForwardCache, Matrix)>> = Vec::with_capacity(steps.len());
        let mut losses = Vec::new();
        let mut regime = 0u64;
        for (snap, targets) in steps {
            let (next, fwd) = self.advance_state(snap, state, true)?;
            state = next;
            let Some(fwd) = fwd else {
                tape.push(None);
                continue;
            };
            regime = regime.rotate_left(7) ^ fwd.regime();
            let grad = match masked_nll_grad(&fwd.raw, targets) {
                Ok((loss, _, grad)) => {
                    losses.push(loss);
                    grad
                }
                Err(Error::EmptyBatch) => Matrix::zeros(fwd.raw.rows(), fwd.raw.cols()),
                Err(e) => return Err(e),
            };
            tape.push(Some((fwd.cache, grad)));
        }
        if backprop && !losses.is_empty() {
            let inv = 1.0 / losses.len() as f64;
            let mut carry: Option<(Vec<u32>, StateGrad)> = None;
            for entry in tape.iter_mut().rev() {
                let Some((cache, grad)) = entry else {
                    carry = None;
                    continue;
                };
                grad.scale_in_place(inv);
                let d_next = carry.take().map(|(ids, g)| remap_state_grad(&ids, &g, cache.node_ids()));
                if let Some(g) = self.model.backward(cache, grad, d_next.as_ref())? {
                    carry = Some((cache.node_ids().to_vec(), masked_prior(g, cache.had_prior())));
                }
            }
        }
        Ok(WindowPass {
            state,
            losses,
            caches: tape.into_iter().flatten().map(|(c, _)| c).collect(),
            regime,
        })
    }

    /// Advances recurrent state through one frame. Supervised frames return
    /// their forward pass; warmup frames fold their batch statistics in
    /// immediately. Single-vehicle frames run batch norm in eval mode, and
    /// empty frames reset state, which is the only break in the chain.
    fn advance_state(
        &mut self,
        snap: &FrameSnapshot,
        state: RecurrentState,
        supervised: bool,
    ) -> Result<(RecurrentState, Option<Forward>)> {
        if snap.is_empty() {
            return Ok((RecurrentState::new(), None));
        }
        let input = self.input(snap)?;
        let mode = if snap.len() >= 2 { Mode::Train } else { Mode::Eval };
        let mut fwd = self.model.forward(&input, Some(&state), mode, &mut self.rng)?;
        let next = fwd.state.take().expect("recurrent forward returns state");
        if supervised {
            return Ok((next, Some(fwd)));
        }
        self.model.commit_batch_stats(&fwd.cache);
        Ok((next, None))
    }

    /// One pass over `segments` in a seeded random order.
    pub fn run_epoch(&mut self, epoch: usize, segments: &[Segment]) -> Result<EpochReport> {
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.shuffle(&mut self.rng);
        let mut tally = Tally::default();
        for &i in &order {
            let seg = &segments[i];
            self.run_segment(seg, &mut tally).map_err(|e| match e {
                Error::Numeric { context } => Error::Training {
                    epoch,
                    segment: seg.id,
                    reason: format!("non-finite value in {context}"),
                },
                other => other,
            })?;
        }
        if tally.frames == 0 {
            return Err(Error::EmptyBatch);
        }
        let mean_nll = tally.loss_sum / tally.frames as f64;
        if !mean_nll.is_finite() {
            return Err(Error::Training {
                epoch,
                segment: order.last().map_or(0, |&i| segments[i].id),
                reason: "epoch-mean NLL is not finite".into(),
            });
        }
        Ok(EpochReport {
            epoch,
            mean_nll,
            supervised_frames: tally.frames,
            optimizer_steps: tally.steps,
            clipped_steps: tally.clipped,
        })
    }

    pub fn into_checkpoint(self, epoch_losses: Vec<f64>) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.config,
            epoch_losses,
            model: self.model,
        }
    }
}

/// Trains for `config.epochs` epochs, reporting each one to `progress`.
pub fn train(
    config: &TrainingConfig,
    segments: &[Segment],
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<ModelCheckpoint> {
    if segments.is_empty() {
        return Err(Error::Argument("no training segments".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let report = trainer.run_epoch(epoch, segments)?;
        log::info!(
            "{} epoch {epoch}: mean NLL {:.4} over {} frames",
            config.arch,
            report.mean_nll,
            report.supervised_frames
        );
        losses.push(report.mean_nll);
        progress(&report);
    }
    Ok(trainer.into_checkpoint(losses))
}

/// Moves state gradients from the row order of `from_ids` into `to_ids`.
fn remap_state_grad(from_ids: &[u32], g: &StateGrad, to_ids: &[u32]) -> StateGrad {
    let hd = g.dh.cols();
    let mut dh = Matrix::zeros(to_ids.len(), hd);
    let mut dc = Matrix::zeros(to_ids.len(), hd);
    for (r, id) in from_ids.iter().enumerate() {
        if let Ok(t) = to_ids.binary_search(id) {
            dh.row_mut(t).copy_from_slice(g.dh.row(r));
            dc.row_mut(t).copy_from_slice(g.dc.row(r));
        }
    }
    StateGrad { dh, dc }
}

/// Zeroes rows that started from zero state; they have no predecessor.
fn masked_prior(mut g: StateGrad, had_prior: &[bool]) -> StateGrad {
    for (r, &had) in had_prior.iter().enumerate() {
        if !had {
            g.dh.row_mut(r).fill(0.0);
            g.dc.row_mut(r).fill(0.0);
        }
    }
    g
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::graph::VehicleState;
    use crate::numerics::{gradient_check, GradCheckOptions, ParamSlot, Probe, SlotList};
    use proptest::prelude::*;

    impl Parameters for Trainer {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &crate::numerics::ParamSlot)) {
            self.model.visit_params(f);
        }

        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut crate::numerics::ParamSlot)) {
            self.model.visit_params_mut(f);
        }
    }

    fn slots(grads: &[&[f64]]) -> SlotList {
        SlotList(
            grads
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let mut p = ParamSlot::new(Matrix::zeros(1, g.len()));
                    p.grad = Matrix::row_vector(g);
                    (format!("p{i}"), p)
                })
                .collect(),
        )
    }

    fn grad_norm(p: &SlotList) -> f64 {
        p.0.iter().map(|(_, s)| s.grad.frobenius_sq()).sum::<f64>().sqrt()
    }

    fn trainable(model: &Model) -> Vec<Matrix> {
        let mut out = Vec::new();
        model.visit_params(&mut |_, p| out.push(p.value.clone()));
        out
    }

    #[test]
    fn six_hundred_frames_split_four_to_one_by_time() {
        let (train, test) = segment_corpus(&corpus(600, 1), DEFAULT_SPLIT_RATIO).unwrap();
        assert_eq!((train.len(), test.len()), (4, 1));
        let last_train = train.iter().map(|s| s.frames().last().unwrap().frame()).max().unwrap();
        assert!(test.iter().all(|s| s.start_frame() > last_train));
        for w in train.windows(2) {
            assert_eq!(w[1].start_frame(), w[0].start_frame() + SEGMENT_FRAMES as u32);
        }
        assert_eq!(test[0].id(), 4);
    }

    #[test]
    fn short_corpus_and_bad_segments_are_rejected() {
        assert!(matches!(segment_corpus(&corpus(119, 1), 0.8), Err(Error::Data(_))));
        assert!(matches!(segment_corpus(&corpus(240, 1), 0.0), Err(Error::Argument(_))));
        let seg = &segments(1, 2)[0];
        let mut frames = seg.frames().to_vec();
        frames.swap(3, 4);
        assert!(matches!(Segment::new(0, frames), Err(Error::Data(_))));
        assert!(matches!(Segment::new(0, seg.frames()[1..].to_vec()), Err(Error::Data(_))));
    }

    #[test]
    fn supervision_starts_after_warmup() {
        let seg = &segments(1, 3)[0];
        let first = Segment::supervised_inputs().start;
        assert_eq!(first + 1, WARMUP_FRAMES);
        assert_eq!(Segment::supervised_inputs().end, SEGMENT_FRAMES - 1);
        let targets = seg.targets(first);
        for (v, t) in seg.frames()[first].vehicles().iter().zip(targets) {
            assert_eq!(t, seg.frames()[first + 1].get(v.vehicle_id).map(|n| n.a));
        }
    }

    #[test]
    fn nll_at_the_std_floor() {
        let p = GmmParams::new(vec![1.0], vec![0.7], vec![crate::layers::STD_FLOOR]).unwrap();
        let expected = (crate::layers::STD_FLOOR * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let got = nll_loss(&[p], &[0.7]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got + 5.9889).abs() < 1e-4);
    }

    #[test]
    fn nll_is_the_node_mean() {
        let a = GmmParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let b = GmmParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.5, 2.0]).unwrap();
        let got = nll_loss(&[a.clone(), b.clone()], &[0.3, 1.5]).unwrap();
        let want = (gmm_nll(&a, 0.3) + gmm_nll(&b, 1.5)) / 2.0;
        assert!((got - want).abs() < 1e-15);
        // standard normal at 0.3: 0.5 ln(2 pi) + 0.045
        assert!((gmm_nll(&a, 0.3) - (0.5 * (2.0 * std::f64::consts::PI).ln() + 0.045)).abs() < 1e-12);
        assert!(matches!(nll_loss(&[], &[]), Err(Error::EmptyBatch)));
        assert!(matches!(nll_loss(&[a], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn collapsed_mixture_equals_single_gaussian() {
        let one = GmmParams::new(vec![1.0], vec![0.4], vec![0.8]).unwrap();
        let three = GmmParams::new(vec![0.2, 0.3, 0.5], vec![0.4; 3], vec![0.8; 3]).unwrap();
        for t in [-3.0, 0.0, 0.4, 2.5] {
            assert!((gmm_nll(&one, t) - gmm_nll(&three, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_rows_carry_no_gradient() {
        let raw = Matrix::from_rows(&[[0.1, -0.2, 0.3, 0.0, -0.5, 0.2], [0.0, 0.4, -1.0, 1.0, 0.1, 0.0]]);
        let (loss, n, grad) = masked_nll_grad(&raw, &[None, Some(0.5)]).unwrap();
        let (l1, g1) = mdn_nll_grad(raw.row(1), 0.5).unwrap();
        assert_eq!(n, 1);
        assert_eq!(loss, l1);
        assert!(grad.row(0).iter().all(|&g| g == 0.0));
        assert_eq!(grad.row(1), g1.as_slice());
        let (_, n2, grad2) = masked_nll_grad(&raw, &[Some(0.5), Some(0.5)]).unwrap();
        assert_eq!(n2, 2);
        assert!((grad2.get(1, 0) - g1[0] / 2.0).abs() < 1e-15);
        assert!(matches!(masked_nll_grad(&raw, &[None, None]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn clipping_examples() {
        let mut p = slots(&[&[6.0, 8.0]]);
        assert_eq!(clip_gradient_norm(&mut p, 5.0).unwrap(), 0.5);
        assert_eq!(p.0[0].1.grad.data(), &[3.0, 4.0]);

        let mut p = slots(&[&[3.0], &[0.0]]);
        assert_eq!(clip_gradient_norm(&mut p, 5.0).unwrap(), 1.0);
        assert_eq!(p.0[0].1.grad.data(), &[3.0]);

        let mut p = slots(&[&[1e200, -1e200], &[1e200]]);
        clip_gradient_norm(&mut p, 5.0).unwrap();
        let norm = p.0.iter().flat_map(|(_, s)| s.grad.data().to_vec()).map(|g| (g / 5.0).powi(2)).sum::<f64>().sqrt() * 5.0;
        assert!((norm - 5.0).abs() < 1e-9);

        let mut p = slots(&[&[1.0, f64::NAN]]);
        assert!(matches!(clip_gradient_norm(&mut p, 5.0), Err(Error::Numeric { .. })));
        assert!(matches!(clip_gradient_norm(&mut slots(&[&[1.0]]), 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = slots(&[&[0.0, 0.0]]);
        p.0[0].1.value = Matrix::row_vector(&[1.5, -2.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &mut st, 0.1).unwrap();
        }
        assert_eq!(p.0[0].1.value.data(), &[1.5, -2.0]);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_the_gradient() {
        let mut p = slots(&[&[0.3, -7.0, 1e-3]]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.01).unwrap();
        let w = p.0[0].1.value.data();
        for (x, s) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-7, "{x}");
        }
        assert!(p.0[0].1.grad.data().iter().all(|&g| g == 0.0), "gradients are consumed");
    }

    #[test]
    fn adam_constant_gradient_converges_to_unit_steps() {
        let mut p = slots(&[&[2.0]]);
        let mut st = AdamState::new(&p);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..500 {
            p.0[0].1.grad = Matrix::row_vector(&[2.0]);
            adam_step(&mut p, &mut st, 1e-3).unwrap();
            let w = p.0[0].1.value.get(0, 0);
            last_step = prev - w;
            prev = w;
        }
        assert!((last_step - 1e-3).abs() < 0.05e-3, "{last_step}");
        let mut other = slots(&[&[1.0], &[1.0]]);
        assert!(adam_step(&mut other, &mut st, 1e-3).is_err());
    }

    #[test]
    fn one_small_step_descends_for_every_feedforward_arch() {
        let seg = &segments(1, 4)[0];
        let k = 60;
        for kind in ArchKind::ALL {
            let config = TrainingConfig {
                learning_rate: 1e-5,
                ..small_config(kind, false)
            };
            let mut t = Trainer::new(config).unwrap();
            let input = t.input(&seg.frames()[k]).unwrap();
            let targets = seg.targets(k);
            let before = t.step_frame(&input, &targets).unwrap();
            let after = t.frame_loss(&input, &targets, None).unwrap();
            assert!(after < before, "{kind:?}: {after} >= {before}");
        }
    }

    #[test]
    fn recurrent_models_refuse_single_frame_steps() {
        let seg = &segments(1, 4)[0];
        let mut t = Trainer::new(small_config(ArchKind::Gcn, true)).unwrap();
        let input = t.input(&seg.frames()[30]).unwrap();
        assert!(matches!(t.step_frame(&input, &seg.targets(30)), Err(Error::State(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let segs = segments(1, 5);
        for recurrent in [false, true] {
            let config = TrainingConfig {
                learning_rate: 0.0,
                epochs: 1,
                ..small_config(ArchKind::Egcn, recurrent)
            };
            let before = Trainer::new(config.clone()).unwrap();
            let after = train(&config, &segs, &mut |_| {}).unwrap();
            assert_eq!(trainable(before.model()), trainable(&after.model));
        }
    }

    #[test]
    fn warmup_frames_do_not_affect_feedforward_training() {
        let segs = segments(1, 6);
        let mut altered = segs[0].frames().to_vec();
        for snap in &mut altered[..WARMUP_FRAMES - 1] {
            let vs: Vec<VehicleState> = snap.vehicles().iter().map(|v| VehicleState { a: -v.a + 1.0, v: v.v + 2.0, ..*v }).collect();
            *snap = FrameSnapshot::new(snap.frame(), vs).unwrap();
        }
        let altered = vec![Segment::new(0, altered).unwrap()];
        let config = small_config(ArchKind::Gcn, false);
        let a = train(&config, &segs, &mut |_| {}).unwrap();
        let b = train(&config, &altered, &mut |_| {}).unwrap();
        assert_eq!(a.model.tensors(), b.model.tensors());
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn training_is_deterministic() {
        let segs = segments(2, 7);
        for recurrent in [false, true] {
            let config = TrainingConfig {
                dropout: 0.1,
                ..small_config(ArchKind::Dgcn, recurrent)
            };
            let a = train(&config, &segs, &mut |_| {}).unwrap();
            let b = train(&config, &segs, &mut |_| {}).unwrap();
            assert_eq!(a.model.tensors(), b.model.tensors());
            assert_eq!(a.epoch_losses, b.epoch_losses);
            let other = train(&TrainingConfig { seed: 12, ..config }, &segs, &mut |_| {}).unwrap();
            assert_ne!(a.model.tensors(), other.model.tensors());
        }
    }

    #[test]
    fn epoch_reports_count_steps() {
        let segs = segments(2, 8);
        let mut reports = Vec::new();
        train(&small_config(ArchKind::Fc, false), &segs, &mut |r| reports.push(r.clone())).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].epoch, 1);
        assert_eq!(reports[0].supervised_frames, 200);
        assert_eq!(reports[0].optimizer_steps, 200);

        reports.clear();
        train(&small_config(ArchKind::Fc, true), &segs, &mut |r| reports.push(r.clone())).unwrap();
        assert_eq!(reports[0].supervised_frames, 200);
        assert_eq!(reports[0].optimizer_steps, 2 * 100 / DEFAULT_BPTT_WINDOW);
    }

    #[test]
    fn a_few_epochs_reduce_the_training_loss() {
        let segs = segments(2, 9);
        for (kind, recurrent) in [(ArchKind::Egcn, false), (ArchKind::Gat, true)] {
            let config = TrainingConfig {
                epochs: 4,
                learning_rate: 3e-3,
                ..small_config(kind, recurrent)
            };
            let ckpt = train(&config, &segs, &mut |_| {}).unwrap();
            let l = &ckpt.epoch_losses;
            assert!(l[3] < l[0], "{kind:?} recurrent={recurrent}: {l:?}");
        }
    }

    #[test]
    fn non_finite_weights_surface_as_a_training_error() {
        let segs = segments(1, 10);
        let mut t = Trainer::new(small_config(ArchKind::Gcn, false)).unwrap();
        t.model.visit_params_mut(&mut |_, p| p.value.data_mut()[0] = f64::NAN);
        match t.run_epoch(1, &segs) {
            Err(Error::Training { epoch: 1, segment: 0, .. }) => {}
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    fn vehicle(id: u32, frame: u32, lane: u32, y: f64, v: f64, a: f64) -> VehicleState {
        VehicleState {
            vehicle_id: id,
            frame,
            lane_id: lane,
            class_id: 2,
            y,
            v,
            a,
        }
    }

    /// Vehicles leave and join between frames, and one frame holds a single
    /// vehicle, so state rows must be matched by id and the chain cut.
    fn churning_window() -> Vec<(FrameSnapshot, Vec<Option<f64>>)> {
        let frames = [
            vec![vehicle(1, 0, 1, 0.0, 10.0, 0.2), vehicle(2, 0, 1, 12.0, 11.0, -0.3), vehicle(3, 0, 2, 6.0, 9.0, 0.5)],
            vec![vehicle(2, 1, 1, 13.1, 11.0, 0.1), vehicle(3, 1, 2, 6.9, 9.1, 0.4), vehicle(4, 1, 2, 20.0, 12.0, -0.6)],
            vec![vehicle(2, 2, 1, 14.2, 10.9, -0.2), vehicle(4, 2, 2, 21.2, 11.9, 0.3), vehicle(5, 2, 1, 2.0, 8.0, 1.0)],
            vec![vehicle(5, 3, 1, 2.8, 8.1, 0.9)],
            vec![vehicle(5, 4, 1, 3.6, 8.2, -0.1), vehicle(6, 4, 1, 9.0, 10.0, 0.0)],
        ];
        let targets = [
            vec![None, Some(0.1), Some(0.4)],
            vec![Some(-0.2), None, Some(0.3)],
            vec![None, None, Some(0.9)],
            vec![Some(-0.1)],
            vec![Some(0.5), Some(-0.4)],
        ];
        frames
            .into_iter()
            .zip(targets)
            .enumerate()
            .map(|(f, (vs, t))| (FrameSnapshot::new(f as u32, vs).unwrap(), t))
            .collect()
    }

    #[test]
    fn truncated_bptt_gradient_matches_finite_differences() {
        let window = churning_window();
        for kind in [ArchKind::Fc, ArchKind::Egcn, ArchKind::Gat] {
            let mut trainer = Trainer::new(small_config(kind, true)).unwrap();
            let report = gradient_check(
                &mut trainer,
                |t: &mut Trainer, grad| {
                    let steps: Vec<(&FrameSnapshot, Vec<Option<f64>>)> = window.iter().map(|(s, tg)| (s, tg.clone())).collect();
                    let pass = t.window_pass(&steps, RecurrentState::new(), grad)?;
                    let loss = pass.losses.iter().sum::<f64>() / pass.losses.len() as f64;
                    Ok(Probe { loss, regime: pass.regime })
                },
                &GradCheckOptions {
                    max_coords_per_slot: Some(12),
                    ..GradCheckOptions::default()
                },
            )
            .unwrap();
            assert!(report.passes(1e-4), "{kind:?}: {report:?}");
            assert!(report.coords_checked > 50);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn clipped_norm_never_exceeds_the_bound(
            g in proptest::collection::vec(-1e6f64..1e6, 1..40),
            max in 0.1f64..20.0,
        ) {
            let mut p = slots(&[&g]);
            let before = grad_norm(&p);
            let scale = clip_gradient_norm(&mut p, max).unwrap();
            let after = grad_norm(&p);
            prop_assert!(after <= max * (1.0 + 1e-9));
            prop_assert!(scale <= 1.0);
            if before <= max {
                prop_assert_eq!(after, before);
            }
        }

        #[test]
        fn adam_first_step_is_bounded_by_lr(g in proptest::collection::vec(-1e3f64..1e3, 1..10), lr in 1e-6f64..1e-1) {
            let mut p = slots(&[&g]);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &mut st, lr).unwrap();
            for (w, g) in p.0[0].1.value.data().iter().zip(&g) {
                prop_assert!(w.abs() <= lr * (1.0 + 1e-12));
                prop_assert!(*g == 0.0 || w.signum() == -g.signum());
            }
        }
    }
}
