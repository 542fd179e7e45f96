//! The full network: region experts over shared semantic tokens, fused by
//! cross-attention queried with the full-frame embedding, plus the motion
//! stream, a transformer refinement and the classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    extract_region_crops, MotionConfig, MotionEncoder, RegionId, SemanticConfig, SemanticEncoder, VideoSample,
    NUM_REGIONS,
};
use crate::error::{Error, Result};
use crate::m3e::{M3e, M3eConfig};
use crate::nn::{AttentionConfig, AttentionInit, CrossAttention, Init, Linear, MlpHead, TransformerEncoder};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// How expert embeddings are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// One expert per region, fused by cross-attention.
    #[default]
    Experts,
    /// Baseline: every region's tokens go through one deeper encoder, no routing.
    SingleExpert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub semantic_patch: usize,
    pub semantic_depth: usize,
    pub semantic_heads: usize,
    pub semantic_tubelet: usize,
    pub expert_heads: usize,
    pub expert_depth: usize,
    pub sgp_window: usize,
    pub sgp_scale_k: usize,
    pub motion: MotionConfig,
    pub fusion_identity: bool,
    /// Gain of the fusion query/key/value initialisation.
    pub fusion_gain: f64,
    pub te_depth: usize,
    pub te_heads: usize,
    pub head_hidden: usize,
    pub routing: Routing,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            semantic_patch: 4,
            semantic_depth: 2,
            semantic_heads: 4,
            semantic_tubelet: 1,
            expert_heads: 4,
            expert_depth: 1,
            sgp_window: 3,
            sgp_scale_k: 3,
            motion: MotionConfig {
                stem_channels: 16,
                stage_channels: vec![16, 24],
                kernel: 3,
                shift_fraction: 0.25,
                se_reduction: 4,
            },
            fusion_identity: false,
            fusion_gain: 1.0,
            te_depth: 1,
            te_heads: 4,
            head_hidden: 32,
            routing: Routing::Experts,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn semantic(&self) -> SemanticConfig {
        SemanticConfig {
            model_dim: self.dim,
            patch: self.semantic_patch,
            depth: self.semantic_depth,
            num_heads: self.semantic_heads,
            tubelet: self.semantic_tubelet,
        }
    }

    pub fn expert(&self) -> M3eConfig {
        M3eConfig {
            model_dim: self.dim,
            num_heads: self.expert_heads,
            sgp_window: self.sgp_window,
            sgp_scale_k: self.sgp_scale_k,
            depth: self.expert_depth,
        }
    }

    /// The no-routing baseline stacks all experts' depth into one encoder.
    pub fn baseline_expert(&self) -> M3eConfig {
        M3eConfig {
            depth: self.expert_depth * NUM_REGIONS,
            ..self.expert()
        }
    }

    pub fn fusion(&self) -> AttentionConfig {
        if self.fusion_identity {
            AttentionConfig::identity(self.dim)
        } else {
            AttentionConfig::new(self.dim, 1)
        }
    }

    pub fn transformer(&self) -> AttentionConfig {
        AttentionConfig::new(self.dim, self.te_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut take = |r: Result<()>| {
            if let Err(e) = r {
                match e {
                    Error::Validation(p) => problems.extend(p),
                    other => problems.push(other.to_string()),
                }
            }
        };
        take(self.semantic().validate());
        take(self.expert().validate());
        take(self.motion.validate());
        take(self.transformer().validate());
        let mut own = Vec::new();
        if self.dim == 0 {
            own.push("model dim must be positive".to_string());
        }
        if self.head_hidden == 0 {
            own.push("classifier hidden width must be positive".to_string());
        }
        if !(self.fusion_gain > 0.0) {
            own.push(format!("fusion gain {} must be positive", self.fusion_gain));
        }
        problems.extend(own);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Which streams and experts take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub use_semantic: bool,
    pub use_motion: bool,
    pub expert_enabled: [bool; NUM_REGIONS],
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::all_on()
    }
}

impl AblationMask {
    pub fn all_on() -> Self {
        Self {
            use_semantic: true,
            use_motion: true,
            expert_enabled: [true; NUM_REGIONS],
        }
    }

    pub fn semantic_only() -> Self {
        Self {
            use_motion: false,
            ..Self::all_on()
        }
    }

    pub fn motion_only() -> Self {
        Self {
            use_semantic: false,
            ..Self::all_on()
        }
    }

    pub fn without_expert(r: RegionId) -> Self {
        let mut m = Self::all_on();
        m.expert_enabled[r.index()] = false;
        m
    }

    pub fn only_expert(r: RegionId) -> Self {
        let mut m = Self::all_on();
        m.expert_enabled = [false; NUM_REGIONS];
        m.expert_enabled[r.index()] = true;
        m
    }

    pub fn enabled(&self, r: RegionId) -> bool {
        self.expert_enabled[r.index()]
    }

    /// Short label such as `full`, `semantic_only`, `no_head`.
    pub fn label(&self) -> String {
        match (self.use_semantic, self.use_motion) {
            (false, _) => "motion_only".into(),
            (true, false) if self.expert_enabled.iter().all(|&e| e) => "semantic_only".into(),
            _ => {
                let off: Vec<&str> = RegionId::ALL.iter().filter(|r| !self.enabled(**r)).map(|r| r.name()).collect();
                let base = if off.is_empty() { "full".to_string() } else { format!("no_{}", off.join("_no_")) };
                if self.use_motion {
                    base
                } else {
                    format!("semantic_only_{base}")
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_semantic && !self.use_motion {
            return Err(Error::contract("ablation mask disables both streams"));
        }
        if self.use_semantic && !self.expert_enabled.iter().any(|&e| e) {
            return Err(Error::contract("ablation mask keeps the semantic stream but disables every expert"));
        }
        Ok(())
    }
}

/// Model inputs derived once per sample: patch rows for each region crop and
/// for the full frame, and the full frames for the motion stream.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub crops: Vec<Tensor<T>>,
    pub full: Tensor<T>,
    pub frames: Tensor<T>,
    pub label: usize,
    pub region: RegionId,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Fusion weights `[1×K]` over the enabled experts, in slot order.
    pub weights: Option<Var>,
    pub slots: Vec<RegionId>,
    pub expert_embeddings: Vec<(RegionId, Var)>,
    pub global: Option<Var>,
}

#[derive(Debug)]
pub struct BMoEModel<T> {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub channels: usize,
    pub class_region_map: Vec<RegionId>,
    pub store: ParamStore<T>,
    pub semantic: SemanticEncoder,
    pub motion: MotionEncoder,
    /// Region experts in key/value slot order.
    pub experts: Vec<(RegionId, M3e)>,
    pub fusion: Option<CrossAttention>,
    pub baseline: Option<M3e>,
    pub motion_proj: Linear,
    pub te: TransformerEncoder,
    pub head: MlpHead,
}

impl<T: Real> Clone for BMoEModel<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            num_classes: self.num_classes,
            channels: self.channels,
            class_region_map: self.class_region_map.clone(),
            store: self.store.clone(),
            semantic: self.semantic.clone(),
            motion: self.motion.clone(),
            experts: self.experts.clone(),
            fusion: self.fusion.clone(),
            baseline: self.baseline.clone(),
            motion_proj: self.motion_proj.clone(),
            te: self.te.clone(),
            head: self.head.clone(),
        }
    }
}

impl<T: Real> BMoEModel<T> {
    pub fn new(cfg: ModelConfig, class_region_map: Vec<RegionId>, channels: usize) -> Result<Self> {
        cfg.validate()?;
        if class_region_map.is_empty() {
            return Err(Error::Validation(vec!["model needs at least one class".into()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let semantic = SemanticEncoder::new(&mut store, "semantic", cfg.semantic(), channels, &mut rng)?;
        let motion = MotionEncoder::new(&mut store, "motion", cfg.motion.clone(), channels, &mut rng)?;
        let (experts, fusion, baseline) = match cfg.routing {
            Routing::Experts => {
                let experts = RegionId::ALL
                    .iter()
                    .map(|&r| Ok((r, M3e::new(&mut store, &format!("expert.{r}"), cfg.expert(), &mut rng)?)))
                    .collect::<Result<Vec<_>>>()?;
                let init = AttentionInit {
                    qkv_gain: cfg.fusion_gain,
                    zero_output: false,
                };
                let fusion = CrossAttention::new(&mut store, "fusion", cfg.fusion(), init, &mut rng)?;
                (experts, Some(fusion), None)
            }
            Routing::SingleExpert => {
                let m = M3e::new(&mut store, "baseline", cfg.baseline_expert(), &mut rng)?;
                (Vec::new(), None, Some(m))
            }
        };
        let motion_proj = Linear::new(&mut store, "motion_proj", motion.output_dim(), cfg.dim, Init::Scaled(1.0), &mut rng)?;
        let te = TransformerEncoder::new(&mut store, "te", cfg.transformer(), cfg.te_depth, &mut rng)?;
        let head = MlpHead::new(
            &mut store,
            "head",
            cfg.dim,
            cfg.head_hidden,
            class_region_map.len(),
            Init::Scaled(1.0),
            &mut rng,
        )?;
        Ok(Self {
            num_classes: class_region_map.len(),
            cfg,
            channels,
            class_region_map,
            store,
            semantic,
            motion,
            experts,
            fusion,
            baseline,
            motion_proj,
            te,
            head,
        })
    }

    /// The same modules over an empty parameter store, for use with the
    /// `*_with` methods while the real store is borrowed mutably.
    pub(crate) fn clone_structure(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            num_classes: self.num_classes,
            channels: self.channels,
            class_region_map: self.class_region_map.clone(),
            store: ParamStore::new(),
            semantic: self.semantic.clone(),
            motion: self.motion.clone(),
            experts: self.experts.clone(),
            fusion: self.fusion.clone(),
            baseline: self.baseline.clone(),
            motion_proj: self.motion_proj.clone(),
            te: self.te.clone(),
            head: self.head.clone(),
        }
    }

    pub fn expert(&self, r: RegionId) -> Option<&M3e> {
        self.experts.iter().find(|(s, _)| *s == r).map(|(_, m)| m)
    }

    /// Same parameters with the expert slots reordered.
    pub fn with_expert_order(&self, order: &[RegionId]) -> Result<Self> {
        let mut experts = Vec::with_capacity(order.len());
        for r in order {
            let m = self.expert(*r).ok_or_else(|| Error::contract(format!("no expert for {r}")))?;
            experts.push((*r, m.clone()));
        }
        if experts.len() != self.experts.len() {
            return Err(Error::contract("expert order must name every expert once"));
        }
        Ok(Self { experts, ..self.clone() })
    }

    /// Same parameters with one expert slot removed.
    pub fn without_expert(&self, r: RegionId) -> Self {
        let experts = self.experts.iter().filter(|(s, _)| *s != r).cloned().collect();
        Self { experts, ..self.clone() }
    }

    pub fn prepare(&self, sample: &VideoSample) -> Result<PreparedSample<T>> {
        sample.validate(&self.class_region_map)?;
        let (_, _, _, c) = sample.dims();
        if c != self.channels {
            return Err(Error::dim("prepare", sample.frames.shape(), &[0, 0, 0, self.channels]));
        }
        let crops = extract_region_crops(sample).iter().map(|rc| self.semantic.patchify(&rc.frames)).collect();
        Ok(PreparedSample {
            crops,
            full: self.semantic.patchify(&sample.frames),
            frames: sample.frames.cast(),
            label: sample.label,
            region: sample.region,
        })
    }

    fn region_tokens(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &PreparedSample<T>, r: RegionId) -> Result<Var> {
        let p = tape.constant(x.crops[r.index()].clone());
        self.semantic.forward(tape, store, p)
    }

    /// `z_g`: pooled semantic tokens of the uncropped frame.
    pub fn global_embedding(&self, tape: &mut Tape<T>, x: &PreparedSample<T>) -> Result<Var> {
        self.global_embedding_with(tape, &self.store, x)
    }

    pub fn global_embedding_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &PreparedSample<T>) -> Result<Var> {
        let p = tape.constant(x.full.clone());
        let tokens = self.semantic.forward(tape, store, p)?;
        tape.mean_rows(tokens)
    }

    /// `z_k` for one region's expert.
    pub fn expert_embedding(&self, tape: &mut Tape<T>, x: &PreparedSample<T>, r: RegionId) -> Result<Var> {
        self.expert_embedding_with(tape, &self.store, x, r)
    }

    /// [`Self::expert_embedding`] reading parameters from `store`.
    pub fn expert_embedding_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &PreparedSample<T>, r: RegionId) -> Result<Var> {
        let expert = self.expert(r).ok_or_else(|| Error::contract(format!("model has no {r} expert")))?;
        let tokens = self.region_tokens(tape, store, x, r)?;
        expert.forward(tape, store, tokens)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &PreparedSample<T>, mask: &AblationMask) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.store, x, mask)
    }

    /// [`Self::forward`] reading parameters from `store`, which must share this model's layout.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: &PreparedSample<T>,
        mask: &AblationMask,
    ) -> Result<ForwardOutput> {
        mask.validate()?;
        let d = self.cfg.dim;
        let mut out = ForwardOutput {
            logits: Var::placeholder(),
            weights: None,
            slots: Vec::new(),
            expert_embeddings: Vec::new(),
            global: None,
        };
        let fused = if mask.use_semantic {
            match (&self.fusion, &self.baseline) {
                (Some(fusion), _) => {
                    for (r, expert) in &self.experts {
                        if mask.enabled(*r) {
                            let tokens = self.region_tokens(tape, store, x, *r)?;
                            let z = expert.forward(tape, store, tokens)?;
                            out.expert_embeddings.push((*r, z));
                            out.slots.push(*r);
                        }
                    }
                    if out.slots.is_empty() {
                        return Err(Error::contract("every enabled expert is missing from this model"));
                    }
                    let zs: Vec<Var> = out.expert_embeddings.iter().map(|e| e.1).collect();
                    let kv = tape.concat_rows(&zs)?;
                    let zg = self.global_embedding_with(tape, store, x)?;
                    out.global = Some(zg);
                    let (z, w) = fusion.forward(tape, store, zg, kv)?;
                    out.weights = Some(w);
                    z
                }
                (None, Some(baseline)) => {
                    let mut seqs = Vec::new();
                    for r in RegionId::ALL.into_iter().filter(|r| mask.enabled(*r)) {
                        seqs.push(self.region_tokens(tape, store, x, r)?);
                    }
                    let tokens = tape.concat_rows(&seqs)?;
                    baseline.forward(tape, store, tokens)?
                }
                (None, None) => return Err(Error::contract("model has no semantic fusion")),
            }
        } else {
            tape.constant(Tensor::zeros(&[1, d]))
        };
        let h = if mask.use_motion {
            let frames = tape.constant(x.frames.clone());
            let zm = self.motion.forward(tape, store, frames)?;
            let pm = self.motion_proj.forward(tape, store, zm)?;
            tape.add(fused, pm)?
        } else {
            fused
        };
        let h = self.te.forward(tape, store, h)?;
        out.logits = self.head.forward(tape, store, h)?;
        Ok(out)
    }

    /// Logits and per-region fusion weights for one sample, without keeping the tape.
    pub fn infer(&self, x: &PreparedSample<T>, mask: &AblationMask) -> Result<Inference> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, mask)?;
        let logits = tape.value(out.logits).data().iter().map(|v| v.as_f64()).collect();
        let weights = out.weights.map(|w| {
            let mut row = [0.0; NUM_REGIONS];
            for (slot, p) in out.slots.iter().zip(tape.value(w).data()) {
                row[slot.index()] = p.as_f64();
            }
            row
        });
        Ok(Inference { logits, weights })
    }

    /// Parameters of the semantic encoder.
    pub fn semantic_params(&self) -> Vec<ParamId> {
        self.semantic.params()
    }

    pub fn expert_params(&self, r: RegionId) -> Vec<ParamId> {
        self.expert(r).map(M3e::params).unwrap_or_default()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Result of [`BMoEModel::infer`]; weights are indexed by [`RegionId`] with
/// zeros for disabled experts.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub weights: Option<[f64; NUM_REGIONS]>,
}

impl Inference {
    pub fn predicted(&self) -> usize {
        crate::nn::argmax(&self.logits)
    }
}
