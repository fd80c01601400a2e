//! Mixed-sample objective, distillation term and the per-strategy total.
//!
//! Everything here operates on embedding nodes of an autodiff tape: the
//! caller runs the networks, this module combines their outputs. Loss
//! kernels from [`crate::losses`] are attached as single tape nodes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::losses::{ssl_loss_weighted, CovState, SslAux, SslKind, SslLossSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    Er,
    Cassle,
    CasslePlus,
    CromoStar,
    Cromo,
    /// Ablation: mix current samples with each other.
    WithinTaskMix,
    /// Ablation: cross-task inputs, partner embedded by the current model.
    CrossTaskMix,
    /// Ablation: as `CrossTaskMix` plus distillation.
    CrossTaskMixDistill,
}

/// Where the second mixing partner comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMix {
    WithinTask,
    CrossTask,
}

/// Which network embeds the mixing partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMix {
    SameModel,
    CrossModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyFlags {
    /// Buffer views join the task-loss batch.
    pub replay: bool,
    pub distill: bool,
    pub input_mix: Option<InputMix>,
    pub output_mix: OutputMix,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Finetune,
        Strategy::Er,
        Strategy::Cassle,
        Strategy::CasslePlus,
        Strategy::CromoStar,
        Strategy::Cromo,
        Strategy::WithinTaskMix,
        Strategy::CrossTaskMix,
        Strategy::CrossTaskMixDistill,
    ];

    pub fn flags(self) -> StrategyFlags {
        use InputMix::*;
        use OutputMix::*;
        let f = |replay, distill, input_mix, output_mix| StrategyFlags {
            replay,
            distill,
            input_mix,
            output_mix,
        };
        match self {
            Strategy::Finetune => f(false, false, None, SameModel),
            Strategy::Er => f(true, false, None, SameModel),
            Strategy::Cassle => f(false, true, None, SameModel),
            Strategy::CasslePlus => f(true, true, None, SameModel),
            Strategy::CromoStar => f(false, false, Some(CrossTask), CrossModel),
            Strategy::Cromo => f(false, true, Some(CrossTask), CrossModel),
            Strategy::WithinTaskMix => f(false, false, Some(WithinTask), SameModel),
            Strategy::CrossTaskMix => f(false, false, Some(CrossTask), SameModel),
            Strategy::CrossTaskMixDistill => f(false, true, Some(CrossTask), SameModel),
        }
    }

    /// Needs exemplars from earlier tasks.
    pub fn uses_buffer(self) -> bool {
        let f = self.flags();
        f.replay || f.input_mix == Some(InputMix::CrossTask)
    }

    /// Needs the snapshot of the previous task's model.
    pub fn uses_frozen(self) -> bool {
        let f = self.flags();
        f.distill || (f.input_mix.is_some() && f.output_mix == OutputMix::CrossModel)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Er => "er",
            Strategy::Cassle => "cassle",
            Strategy::CasslePlus => "cassle_plus",
            Strategy::CromoStar => "cromo_star",
            Strategy::Cromo => "cromo",
            Strategy::WithinTaskMix => "within_task_mix",
            Strategy::CrossTaskMix => "cross_task_mix",
            Strategy::CrossTaskMixDistill => "cross_task_mix_distill",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar summary of one step's objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub strategy: String,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub cromo_loss_v1: f64,
    pub cromo_loss_v2: f64,
    pub total: f64,
    /// Distillation weight actually applied (0 for strategies without it).
    pub zeta: f64,
    pub lambda: Vec<f64>,
}

impl LossBundle {
    pub fn recomposed_total(&self) -> f64 {
        self.task_loss + self.zeta * self.distill_loss + self.cromo_loss_v1 + self.cromo_loss_v2
    }
}

/// Two views' worth of nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewPair {
    pub v1: NodeId,
    pub v2: NodeId,
}

/// Embeddings of the mixed views and their two sources.
#[derive(Debug, Clone)]
pub struct MixInputs {
    /// `z_mix` per view; for BYOL, the predictor output of the mixed
    /// embedding.
    pub z: ViewPair,
    /// `z_t` for the current rows that were mixed; for BYOL, the target
    /// network's embedding.
    pub anchor: ViewPair,
    /// Partner embedding, row-aligned with `z`.
    pub partner: ViewPair,
    pub lambda: Vec<f64>,
}

/// Everything [`total_loss`] may consume. Optional parts are only read when
/// the strategy needs them and `task_index > 0`.
#[derive(Debug, Clone)]
pub struct LossInputs {
    /// Zero-based index of the task being learnt.
    pub task_index: usize,
    /// Current-model embeddings of the task batch (replay rows included
    /// when the strategy replays).
    pub current: ViewPair,
    /// BYOL predictor outputs of `current`.
    pub predicted: Option<ViewPair>,
    /// BYOL target-network embeddings of the same rows as `current`.
    pub target: Option<ViewPair>,
    /// Frozen-model embeddings of the rows of `current`.
    pub old: Option<ViewPair>,
    /// Distillation-head outputs `h(z)` of `current`.
    pub distilled: Option<ViewPair>,
    pub mix: Option<MixInputs>,
}

/// Root node, scalar summary and advanced CorInfoMax state of one step.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub root: NodeId,
    pub bundle: LossBundle,
    pub state: Option<CovState>,
}

/// One SSL evaluation attached to the tape. For BYOL `a` must be the
/// predictor output.
pub fn ssl_term(
    tape: &mut Tape,
    spec: &SslLossSpec,
    state: Option<&CovState>,
    a: NodeId,
    b: NodeId,
    extra: Option<NodeId>,
    weights: Option<&[f64]>,
) -> Result<(NodeId, Option<CovState>)> {
    let out = {
        let va = tape.value(a).view();
        let aux = SslAux {
            predicted: (spec.kind == SslKind::Byol).then_some(va),
            negatives: extra.map(|e| tape.value(e).view()),
        };
        ssl_loss_weighted(spec, state, va, tape.value(b).view(), aux, weights)?
    };
    if !out.loss.value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{} loss", spec.kind),
            detail: format!("value {}", out.loss.value),
        });
    }
    let mut grads = vec![(a, out.loss.grad_a), (b, out.loss.grad_b)];
    if let (Some(e), Some(g)) = (extra, out.loss.grad_extra) {
        grads.push((e, g));
    }
    Ok((tape.loss(out.loss.value, grads), out.state))
}

fn check_lambda(lambda: &[f64], rows: usize) -> Result<()> {
    if lambda.len() != rows {
        return Err(Error::Shape(format!(
            "{} coefficients for {rows} rows",
            lambda.len()
        )));
    }
    if let Some(l) = lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient {l} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `λ L(z_mix, z_t) + (1 - λ) L(z_mix, z̄_M)`.
///
/// Per-pair kinds weight each pair by its own λ. InfoNCE terms also see
/// the third group as extra negatives, so all three groups repel each
/// other. Batch-statistic kinds weight the two batch losses by the mean λ.
/// CorInfoMax reads `state` without advancing it.
pub fn cromo_loss(
    tape: &mut Tape,
    spec: &SslLossSpec,
    state: Option<&CovState>,
    z_mix: NodeId,
    z_t: NodeId,
    z_m: NodeId,
    lambda: &[f64],
) -> Result<NodeId> {
    let dim = tape.value(z_mix).dim();
    if tape.value(z_t).dim() != dim || tape.value(z_m).dim() != dim {
        return Err(Error::Shape(format!(
            "cromo_loss: {:?}, {:?}, {:?}",
            dim,
            tape.value(z_t).dim(),
            tape.value(z_m).dim()
        )));
    }
    check_lambda(lambda, dim.0)?;
    if spec.is_pairwise() {
        let rest: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
        let pool = |other| (spec.kind == SslKind::Simclr).then_some(other);
        let (a, _) = ssl_term(tape, spec, state, z_mix, z_t, pool(z_m), Some(lambda))?;
        let (b, _) = ssl_term(tape, spec, state, z_mix, z_m, pool(z_t), Some(&rest))?;
        Ok(tape.weighted_sum(&[(a, 1.0), (b, 1.0)]))
    } else {
        let mean = lambda.iter().sum::<f64>() / lambda.len() as f64;
        let (a, _) = ssl_term(tape, spec, state, z_mix, z_t, None, None)?;
        let (b, _) = ssl_term(tape, spec, state, z_mix, z_m, None, None)?;
        Ok(tape.weighted_sum(&[(a, mean), (b, 1.0 - mean)]))
    }
}

/// `L(z̄¹, h(z¹)) + L(z̄², h(z²))`. For BYOL the head output is the
/// prediction and the frozen embedding the target.
pub fn distill_loss(
    tape: &mut Tape,
    spec: &SslLossSpec,
    state: Option<&CovState>,
    old: ViewPair,
    distilled: ViewPair,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(2);
    for (o, h) in [(old.v1, distilled.v1), (old.v2, distilled.v2)] {
        if tape.value(o).dim() != tape.value(h).dim() {
            return Err(Error::Shape(
                "distill_loss: frozen and head outputs differ in shape".into(),
            ));
        }
        let (a, b) = if spec.kind == SslKind::Byol {
            (h, o)
        } else {
            (o, h)
        };
        terms.push((ssl_term(tape, spec, state, a, b, None, None)?.0, 1.0));
    }
    Ok(tape.weighted_sum(&terms))
}

fn missing(strategy: Strategy, what: &str) -> Error {
    Error::MissingInput {
        strategy: strategy.name().into(),
        missing: what.into(),
    }
}

/// Task loss of the current views. BYOL sums both prediction directions.
fn task_loss(
    tape: &mut Tape,
    spec: &SslLossSpec,
    state: Option<&CovState>,
    strategy: Strategy,
    inp: &LossInputs,
) -> Result<(NodeId, Option<CovState>)> {
    if spec.kind == SslKind::Byol {
        let p = inp
            .predicted
            .ok_or_else(|| missing(strategy, "BYOL predictor outputs"))?;
        let t = inp
            .target
            .ok_or_else(|| missing(strategy, "BYOL target embeddings"))?;
        let (a, _) = ssl_term(tape, spec, None, p.v1, t.v2, None, None)?;
        let (b, _) = ssl_term(tape, spec, None, p.v2, t.v1, None, None)?;
        Ok((tape.weighted_sum(&[(a, 1.0), (b, 1.0)]), None))
    } else {
        ssl_term(
            tape,
            spec,
            state,
            inp.current.v1,
            inp.current.v2,
            None,
            None,
        )
    }
}

/// Full objective for `strategy`:
/// `task + ζ distill + cromo(view 1) + cromo(view 2)`, with the terms the
/// strategy does not use fixed at zero. On the first task only the task
/// loss is active. `zeta` is ignored by strategies without distillation.
pub fn total_loss(
    tape: &mut Tape,
    strategy: Strategy,
    spec: &SslLossSpec,
    state: Option<&CovState>,
    inp: &LossInputs,
    zeta: f64,
) -> Result<StepLoss> {
    if !zeta.is_finite() || zeta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "zeta must be finite and >= 0, got {zeta}"
        )));
    }
    let flags = strategy.flags();
    let later = inp.task_index > 0;
    let (task, next_state) = task_loss(tape, spec, state, strategy, inp)?;

    let zeta = if flags.distill && later { zeta } else { 0.0 };
    let distill = if zeta > 0.0 {
        let old = inp
            .old
            .ok_or_else(|| missing(strategy, "frozen-model embeddings of the current views"))?;
        let h = inp
            .distilled
            .ok_or_else(|| missing(strategy, "distillation-head outputs"))?;
        Some(distill_loss(tape, spec, state, old, h)?)
    } else {
        None
    };

    let mut lambda = Vec::new();
    let mut mix_terms = [None, None];
    if flags.input_mix.is_some() && later {
        let m = inp
            .mix
            .as_ref()
            .ok_or_else(|| missing(strategy, "mixed-view embeddings"))?;
        for (slot, (z, (t, p))) in mix_terms.iter_mut().zip([
            (m.z.v1, (m.anchor.v1, m.partner.v1)),
            (m.z.v2, (m.anchor.v2, m.partner.v2)),
        ]) {
            *slot = Some(cromo_loss(tape, spec, state, z, t, p, &m.lambda)?);
        }
        lambda = m.lambda.clone();
    }

    let mut terms = vec![(task, 1.0)];
    if let Some(d) = distill {
        terms.push((d, zeta));
    }
    terms.extend(mix_terms.iter().flatten().map(|&c| (c, 1.0)));
    let root = tape.weighted_sum(&terms);
    let val = |n: Option<NodeId>| n.map_or(0.0, |n| tape.scalar(n));
    let bundle = LossBundle {
        strategy: strategy.name().into(),
        task_loss: tape.scalar(task),
        distill_loss: val(distill),
        cromo_loss_v1: val(mix_terms[0]),
        cromo_loss_v2: val(mix_terms[1]),
        total: tape.scalar(root),
        zeta,
        lambda,
    };
    Ok(StepLoss {
        root,
        bundle,
        state: next_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mat;
    use crate::losses::{barlow_twins, byol_mse, info_nce};
    use crate::rng::{stream, Stream};
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Mat {
        let mut g = stream(seed, Stream::Synthetic, 9, 0);
        Mat::from_shape_fn((r, c), |_| StandardNormal.sample(&mut g))
    }

    fn consts(tape: &mut Tape, ms: &[&Mat]) -> Vec<NodeId> {
        ms.iter().map(|m| tape.constant((*m).clone())).collect()
    }

    #[test]
    fn endpoints_are_exact() {
        let (zm, zt, zo) = (randn(5, 3, 1), randn(5, 3, 2), randn(5, 3, 3));
        for kind in SslKind::ALL {
            let spec = SslLossSpec::new(kind);
            for (l, other) in [(1.0, &zt), (0.0, &zo)] {
                let mut tape = Tape::new();
                let n = consts(&mut tape, &[&zm, &zt, &zo]);
                let c = cromo_loss(&mut tape, &spec, None, n[0], n[1], n[2], &[l; 5]).unwrap();
                let rival = if l == 1.0 { n[2] } else { n[1] };
                let extra = (kind == SslKind::Simclr).then_some(rival);
                let o = consts(&mut tape, &[other])[0];
                let (single, _) = ssl_term(&mut tape, &spec, None, n[0], o, extra, None).unwrap();
                assert_eq!(tape.scalar(c), tape.scalar(single), "{kind} at lambda {l}");
            }
        }
    }

    #[test]
    fn byol_linear_combination() {
        let (zm, zt, zo) = (randn(6, 4, 4), randn(6, 4, 5), randn(6, 4, 6));
        let spec = SslLossSpec::new(SslKind::Byol);
        let mut tape = Tape::new();
        let n = consts(&mut tape, &[&zm, &zt, &zo]);
        let c = cromo_loss(&mut tape, &spec, None, n[0], n[1], n[2], &[0.3; 6]).unwrap();
        let la = byol_mse(zm.view(), zt.view()).unwrap().value;
        let lb = byol_mse(zm.view(), zo.view()).unwrap().value;
        assert!((tape.scalar(c) - (0.3 * la + 0.7 * lb)).abs() < 1e-12);
    }

    #[test]
    fn barlow_uses_mean_lambda() {
        let (zm, zt, zo) = (randn(6, 3, 7), randn(6, 3, 8), randn(6, 3, 9));
        let spec = SslLossSpec::new(SslKind::BarlowTwins);
        let lam = [0.1, 0.2, 0.3, 0.4, 0.5, 0.9];
        let mut tape = Tape::new();
        let n = consts(&mut tape, &[&zm, &zt, &zo]);
        let c = cromo_loss(&mut tape, &spec, None, n[0], n[1], n[2], &lam).unwrap();
        let mean = 2.4 / 6.0;
        let want = mean
            * barlow_twins(zm.view(), zt.view(), spec.barlow_lambda)
                .unwrap()
                .value
            + (1.0 - mean)
                * barlow_twins(zm.view(), zo.view(), spec.barlow_lambda)
                    .unwrap()
                    .value;
        assert!((tape.scalar(c) - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_lambda_and_shapes() {
        let z = randn(3, 2, 1);
        let spec = SslLossSpec::new(SslKind::Simclr);
        let mut tape = Tape::new();
        let n = consts(&mut tape, &[&z, &z, &randn(4, 2, 2)]);
        assert!(cromo_loss(&mut tape, &spec, None, n[0], n[1], n[1], &[1.2, 0.0, 0.0]).is_err());
        assert!(cromo_loss(&mut tape, &spec, None, n[0], n[1], n[2], &[0.5; 3]).is_err());
    }

    #[test]
    fn perfect_byol_distillation_is_zero() {
        let z = randn(4, 3, 3);
        let spec = SslLossSpec::new(SslKind::Byol);
        let mut tape = Tape::new();
        let n = consts(&mut tape, &[&z, &z]);
        let vp = ViewPair { v1: n[0], v2: n[1] };
        let d = distill_loss(&mut tape, &spec, None, vp, vp).unwrap();
        assert!(tape.scalar(d).abs() < 1e-15);
    }

    fn simple_inputs(tape: &mut Tape, task_index: usize) -> LossInputs {
        let n = consts(
            tape,
            &[
                &randn(4, 3, 1),
                &randn(4, 3, 2),
                &randn(4, 3, 3),
                &randn(4, 3, 4),
                &randn(4, 3, 5),
                &randn(4, 3, 6),
            ],
        );
        LossInputs {
            task_index,
            current: ViewPair { v1: n[0], v2: n[1] },
            predicted: None,
            target: None,
            old: Some(ViewPair { v1: n[2], v2: n[3] }),
            distilled: Some(ViewPair { v1: n[4], v2: n[5] }),
            mix: Some(MixInputs {
                z: ViewPair { v1: n[4], v2: n[5] },
                anchor: ViewPair { v1: n[0], v2: n[1] },
                partner: ViewPair { v1: n[2], v2: n[3] },
                lambda: vec![0.2, 0.4, 0.6, 0.8],
            }),
        }
    }

    #[test]
    fn first_task_is_task_loss_only() {
        for s in Strategy::ALL {
            let mut tape = Tape::new();
            let inp = simple_inputs(&mut tape, 0);
            let out = total_loss(&mut tape, s, &SslLossSpec::default(), None, &inp, 1.0).unwrap();
            assert_eq!(out.bundle.total, out.bundle.task_loss, "{s}");
        }
    }

    #[test]
    fn additivity_and_nesting() {
        let spec = SslLossSpec::default();
        let run = |s: Strategy, zeta: f64| {
            let mut tape = Tape::new();
            let inp = simple_inputs(&mut tape, 1);
            total_loss(&mut tape, s, &spec, None, &inp, zeta)
                .unwrap()
                .bundle
        };
        let full = run(Strategy::Cromo, 1.0);
        assert!(full.distill_loss > 0.0 && full.cromo_loss_v1 > 0.0);
        assert!((full.total - full.recomposed_total()).abs() < 1e-10);
        assert_eq!(
            run(Strategy::Cromo, 0.0).total,
            run(Strategy::CromoStar, 1.0).total
        );
        let cassle = run(Strategy::Cassle, 1.0);
        assert_eq!(cassle.total, cassle.task_loss + cassle.distill_loss);
        assert_eq!(run(Strategy::CasslePlus, 1.0).total, cassle.total);
        let task = info_nce(randn(4, 3, 1).view(), randn(4, 3, 2).view(), 0.5, None)
            .unwrap()
            .value;
        assert_eq!(run(Strategy::Finetune, 1.0).total, task);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let mut tape = Tape::new();
        let mut inp = simple_inputs(&mut tape, 1);
        inp.mix = None;
        let err = total_loss(
            &mut tape,
            Strategy::Cromo,
            &SslLossSpec::default(),
            None,
            &inp,
            1.0,
        );
        assert!(matches!(err, Err(Error::MissingInput { .. })));
    }
}
