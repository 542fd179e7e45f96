//! Finite-difference verification of every block and of the full model
//! at toy sizes, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassSpec, DatasetConfig, MotionKind, Placement, RegionLayout};
use crate::encoders::{MotionConfig, MotionEncoder, RegionId, SemanticEncoder};
use crate::error::{Error, Result};
use crate::m3e::{M3e, SgpLayer};
use crate::model::{AblationMask, BMoEModel, ModelConfig};
use crate::nn::{
    normal_tensor, AttentionConfig, AttentionInit, CrossAttention, Init, MlpHead, MultiHeadAttention, SeConfig,
    SqueezeExcitation, TemporalShift, TransformerEncoder, TsmConfig,
};
use crate::tensor::{relative_error, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub clip_length: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub motion_stem: usize,
    pub motion_stages: Vec<usize>,
    pub head_hidden: usize,
    pub stencil: Stencil,
    /// Finite-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor of the full model; blocks
    /// are checked on every coordinate.
    pub model_coords_per_tensor: usize,
    pub max_params: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            clip_length: 6,
            height: 8,
            width: 8,
            channels: 2,
            dim: 16,
            heads: 2,
            motion_stem: 8,
            motion_stages: vec![8, 12],
            head_hidden: 16,
            stencil: Stencil::FivePoint,
            eps: 1e-3,
            tolerance: 1e-4,
            model_coords_per_tensor: 12,
            max_params: 20_000,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            semantic_patch: 4,
            semantic_depth: 1,
            semantic_heads: self.heads,
            semantic_tubelet: 1,
            expert_heads: self.heads,
            expert_depth: 1,
            motion: MotionConfig {
                stem_channels: self.motion_stem,
                stage_channels: self.motion_stages.clone(),
                kernel: 3,
                shift_fraction: 0.25,
                se_reduction: 4,
            },
            te_depth: 1,
            te_heads: self.heads,
            head_hidden: self.head_hidden,
            init_seed: self.seed,
            ..ModelConfig::default()
        }
    }

    /// Two classes per region.
    pub fn dataset(&self) -> DatasetConfig {
        let classes = (0..8)
            .map(|i| ClassSpec {
                class_id: i,
                name: vec![format!("class{i}")],
                region: RegionId::from_index(i / 2).expect("four regions"),
                motion_kind: if i % 2 == 0 { MotionKind::Burst } else { MotionKind::Sustained },
                duration_frames: [2, 3],
                amplitude: 1.0,
                pattern: i,
                flicker: 0.0,
                placement: Placement::Whole,
            })
            .collect();
        DatasetConfig {
            classes,
            clip_length: self.clip_length,
            height: self.height,
            width: self.width,
            channels: self.channels,
            noise_std: 0.3,
            samples_per_class: 1,
            class_counts: None,
            region_layout: RegionLayout::Fixed,
            seed: self.seed,
        }
    }
}

/// Central difference stencils. The three-point rule leaves roundoff of order
/// `1e-16·|f|/eps` in every estimate, which swamps gradients that are exactly
/// zero (attention key biases, for one); the five-point rule reaches the same
/// truncation error with a step a hundred times larger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    ThreePoint,
    #[default]
    FivePoint,
}

fn stencil(kind: Stencil, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok(match kind {
        Stencil::ThreePoint => (f(h)? - f(-h)?) / (2.0 * h),
        Stencil::FivePoint => (8.0 * (f(h)? - f(-h)?) - (f(2.0 * h)? - f(-2.0 * h)?)) / (12.0 * h),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub params: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub model_params: usize,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Adds Gaussian noise to every parameter so that zero-initialised paths
/// carry gradient too.
fn perturb(store: &mut ParamStore<f64>, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += std * n;
        }
    }
}

struct Checker<'a> {
    cfg: &'a GradcheckConfig,
    rng: ChaCha8Rng,
}

type Objective<'f> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, Option<Var>) -> Result<Var> + 'f;

impl Checker<'_> {
    /// Compares the tape gradient of `f` (a scalar) with central differences
    /// over parameters (up to `per_tensor` coordinates each, all when `None`)
    /// and over every coordinate of `input`.
    fn check(
        &mut self,
        name: &str,
        store: &mut ParamStore<f64>,
        input: Option<Tensor<f64>>,
        per_tensor: Option<usize>,
        f: &Objective<'_>,
    ) -> Result<BlockReport> {
        let mut tape = Tape::new();
        let x = input.clone().map(|t| tape.leaf(t, true));
        let loss = f(&mut tape, store, x)?;
        let grads = tape.backward(loss)?;
        store.zero_grads();
        store.reset_grads();
        tape.accumulate_into(&grads, store);
        let eval = |store: &ParamStore<f64>, input: Option<&Tensor<f64>>| -> Result<f64> {
            let mut t = Tape::new();
            let x = input.map(|v| t.constant(v.clone()));
            let l = f(&mut t, store, x)?;
            let v = t.value(l).item()?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} objective")));
            }
            Ok(v)
        };
        let eps = self.cfg.eps;
        let mut worst = 0.0f64;
        let mut coords = 0;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let n = store.get(id).numel();
            let analytic = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let picks: Vec<usize> = match per_tensor {
                Some(k) if k < n => (0..k).map(|_| self.rng.random_range(0..n)).collect(),
                _ => (0..n).collect(),
            };
            for i in picks {
                let orig = store.get(id).data()[i];
                let fd = stencil(self.cfg.stencil, eps, |h| {
                    store.get_mut(id).data_mut()[i] = orig + h;
                    let v = eval(store, input.as_ref());
                    store.get_mut(id).data_mut()[i] = orig;
                    v
                })?;
                worst = worst.max(relative_error(fd, analytic[i]));
                coords += 1;
            }
        }
        if let (Some(mut inp), Some(xv)) = (input, x) {
            let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inp.numel()]);
            for i in 0..inp.numel() {
                let orig = inp.data()[i];
                let fd = stencil(self.cfg.stencil, eps, |h| {
                    inp.data_mut()[i] = orig + h;
                    let v = eval(store, Some(&inp));
                    inp.data_mut()[i] = orig;
                    v
                })?;
                worst = worst.max(relative_error(fd, analytic[i]));
                coords += 1;
            }
        }
        let report = BlockReport {
            name: name.to_string(),
            params: store.num_scalars(),
            coordinates: coords,
            max_rel_error: worst,
            passed: worst < self.cfg.tolerance,
        };
        log::info!("gradcheck {name}: max rel err {:.3e} over {coords} coordinates", worst);
        Ok(report)
    }

    fn input(&mut self, shape: &[usize]) -> Tensor<f64> {
        normal_tensor(&mut self.rng, shape, 1.0)
    }

    /// Checks `block` under the objective `sum(block(x) ⊙ R)` for a fixed random `R`.
    fn check_block<B>(&mut self, name: &str, store: &mut ParamStore<f64>, input: Tensor<f64>, block: B) -> Result<BlockReport>
    where
        B: Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> Result<Var>,
    {
        perturb(store, 0.3, &mut self.rng);
        let probe = {
            let mut t = Tape::new();
            let x = t.constant(input.clone());
            let y = block(&mut t, store, x)?;
            t.value(y).shape().to_vec()
        };
        let r = self.input(&probe);
        let f = move |tape: &mut Tape<f64>, s: &ParamStore<f64>, x: Option<Var>| -> Result<Var> {
            let y = block(tape, s, x.expect("block input"))?;
            let rv = tape.constant(r.clone());
            let p = tape.mul(y, rv)?;
            tape.sum(p)
        };
        self.check(name, store, Some(input), None, &f)
    }
}

/// Runs every block check and the end-to-end check. Refuses model sizes
/// above `max_params`.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let dcfg = cfg.dataset();
    let mut model = BMoEModel::<f64>::new(cfg.model(), dcfg.class_region_map(), cfg.channels)?;
    let total = model.num_params();
    if total >= cfg.max_params {
        return Err(Error::Validation(vec![format!(
            "gradcheck model has {total} parameters; the limit is {}",
            cfg.max_params
        )]));
    }
    let mut ck = Checker {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let (t, d, h) = (cfg.clip_length, cfg.dim, cfg.heads);
    let mut blocks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    let mut s = ParamStore::new();
    let mhsa = MultiHeadAttention::new(&mut s, "mhsa", AttentionConfig::new(d, h), AttentionInit::RANDOM, &mut rng)?;
    let x = ck.input(&[t, d]);
    blocks.push(ck.check_block("mhsa", &mut s, x, |tp, st, x| mhsa.forward(tp, st, x))?);

    let mut s = ParamStore::new();
    let sgp = SgpLayer::new(&mut s, "sgp", &cfg.model().expert(), &mut rng)?;
    let x = ck.input(&[t, d]);
    blocks.push(ck.check_block("sgp", &mut s, x, |tp, st, x| sgp.forward(tp, st, x))?);

    let mut s = ParamStore::new();
    let m3e = M3e::new(&mut s, "m3e", cfg.model().expert(), &mut rng)?;
    let x = ck.input(&[t, d]);
    blocks.push(ck.check_block("m3e", &mut s, x, |tp, st, x| m3e.forward(tp, st, x))?);

    let c = cfg.motion_stages[0];
    let mut s = ParamStore::new();
    let se = SqueezeExcitation::new(&mut s, "se", SeConfig::new(c, 4), Init::Scaled(1.0), &mut rng)?;
    let x = ck.input(&[t, 4, 4, c]);
    blocks.push(ck.check_block("se", &mut s, x, |tp, st, x| se.forward(tp, st, x))?);

    let mut s = ParamStore::new();
    let tsm = TemporalShift::new(TsmConfig::new(0.25, c))?;
    let x = ck.input(&[t, 4, 4, c]);
    blocks.push(ck.check_block("tsm", &mut s, x, |tp, _, x| tsm.forward(tp, x))?);

    let mut s = ParamStore::new();
    let fusion = CrossAttention::new(&mut s, "fusion", AttentionConfig::new(d, 1), AttentionInit::RANDOM, &mut rng)?;
    let kv = normal_tensor::<f64, _>(&mut rng, &[4, d], 1.0);
    let x = ck.input(&[1, d]);
    blocks.push(ck.check_block("fusion", &mut s, x.clone(), |tp, st, q| {
        let k = tp.constant(kv.clone());
        Ok(fusion.forward(tp, st, q, k)?.0)
    })?);
    let mut s = ParamStore::new();
    let fusion_kv = CrossAttention::new(&mut s, "fusion", AttentionConfig::new(d, 1), AttentionInit::RANDOM, &mut rng)?;
    let q = x;
    let kv_in = ck.input(&[4, d]);
    blocks.push(ck.check_block("fusion_keys", &mut s, kv_in, |tp, st, kv| {
        let qv = tp.constant(q.clone());
        Ok(fusion_kv.forward(tp, st, qv, kv)?.0)
    })?);

    let mut s = ParamStore::new();
    let te = TransformerEncoder::new(&mut s, "te", AttentionConfig::new(d, h), 1, &mut rng)?;
    let x = ck.input(&[1, d]);
    blocks.push(ck.check_block("te", &mut s, x, |tp, st, x| te.forward(tp, st, x))?);
    let x = ck.input(&[t, d]);
    blocks.push(ck.check_block("te_sequence", &mut s, x, |tp, st, x| te.forward(tp, st, x))?);

    let mut s = ParamStore::new();
    let head = MlpHead::new(&mut s, "head", d, cfg.head_hidden, 8, Init::Scaled(1.0), &mut rng)?;
    let x = ck.input(&[1, d]);
    blocks.push(ck.check_block("head", &mut s, x, |tp, st, x| head.forward(tp, st, x))?);

    let mut s = ParamStore::new();
    let sem_cfg = cfg.model().semantic();
    let sem = SemanticEncoder::new(&mut s, "semantic", sem_cfg, cfg.channels, &mut rng)?;
    let x = ck.input(&[sem_cfg.num_tokens(t), sem_cfg.patch * sem_cfg.patch * cfg.channels]);
    blocks.push(ck.check_block("semantic", &mut s, x, |tp, st, x| sem.forward(tp, st, x))?);

    let mut s = ParamStore::new();
    let motion = MotionEncoder::new(&mut s, "motion", cfg.model().motion, cfg.channels, &mut rng)?;
    let x = ck.input(&[t, cfg.height, cfg.width, cfg.channels]);
    blocks.push(ck.check_block("motion", &mut s, x, |tp, st, x| motion.forward(tp, st, x))?);

    let sample = crate::data::generate_sample(&dcfg, 3, 3);
    let prepared = model.prepare(&sample)?;
    perturb(&mut model.store, 0.3, &mut ck.rng);
    let view = model.clone_structure();
    let mut store = std::mem::take(&mut model.store);
    let mask = AblationMask::all_on();
    let f = |tp: &mut Tape<f64>, st: &ParamStore<f64>, _: Option<Var>| -> Result<Var> {
        let out = view.forward_with(tp, st, &prepared, &mask)?;
        tp.cross_entropy(out.logits, prepared.label)
    };
    blocks.push(ck.check(
        "end_to_end",
        &mut store,
        None,
        Some(cfg.model_coords_per_tensor),
        &f,
    )?);

    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradcheckReport {
        model_params: total,
        tolerance: cfg.tolerance,
        blocks,
        passed,
    })
}
