use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetworkError, RouterConfig};
use crate::tensor::{Tape, Tensor, Var};

/// One named weight array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub tensor: Tensor,
}

/// Every learnable weight of the router, in a fixed layout derived from
/// the config. Nothing here is indexed by model, so the same weights score
/// any pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub blocks: Vec<ParamBlock>,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zero,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn layout(cfg: &RouterConfig) -> Vec<Spec> {
    let d = cfg.hidden_dim;
    let hp = cfg.pair_hidden;
    let mut specs = Vec::new();
    let mut w = |name: String, rows: usize, cols: usize| {
        specs.push(Spec {
            name,
            rows,
            cols,
            init: Init::Uniform,
        })
    };
    w("image_proj".into(), cfg.image_dim, d);
    w("question_proj".into(), cfg.question_dim, d);
    if cfg.variant.capsules {
        w("capsule_queries".into(), cfg.capsule_count, d);
        w("capsule_key".into(), d, d);
        w("capsule_value".into(), d, d);
    }
    if !cfg.variant.model_tokens {
        w("slot_tokens".into(), cfg.slot_count, d);
    }
    let mut specs2 = std::mem::take(&mut specs);
    let mut push = |name: String, rows: usize, cols: usize, init: Init| {
        specs2.push(Spec { name, rows, cols, init })
    };
    if cfg.variant.model_tokens {
        push("token_proj".into(), cfg.descriptor_dim, d, Init::Uniform);
        push("token_bias".into(), 1, d, Init::Zero);
    }
    for h in 0..cfg.comm_layers {
        let p = |s: &str| format!("layer{h}.{s}");
        for n in ["read_q", "read_k", "read_v"] {
            push(p(n), d, d, Init::Uniform);
        }
        push(p("ffn_w1"), 3 * d, d, Init::Uniform);
        push(p("ffn_b1"), 1, d, Init::Zero);
        push(p("ffn_w2"), d, d, Init::Uniform);
        push(p("ffn_b2"), 1, d, Init::Zero);
        // First layer of the pairwise MLP over [a_i; a_j; a_i - a_j; a_i * a_j],
        // stored as its four d x hp row blocks.
        for n in ["psi_self", "psi_other", "psi_diff", "psi_prod"] {
            push(p(n), d, hp, Init::Uniform);
        }
        push(p("psi_b1"), 1, hp, Init::Zero);
        push(p("psi_w2"), hp, 1, Init::Uniform);
        push(p("psi_b2"), 1, 1, Init::Zero);
        for n in ["self_q", "self_k", "self_v"] {
            push(p(n), d, d, Init::Uniform);
        }
        push(p("score_w1"), d, d, Init::Uniform);
        push(p("score_b1"), 1, d, Init::Zero);
        push(p("score_w2"), d, 1, Init::Uniform);
        push(p("score_b2"), 1, 1, Init::Zero);
        for n in ["fb_q", "fb_k", "fb_v"] {
            push(p(n), d, d, Init::Uniform);
        }
    }
    let head_in = if cfg.comm_layers == 0 { 2 * d } else { d };
    let head_out = if cfg.variant.distributional { 2 } else { 1 };
    push("out_w1".into(), head_in, d, Init::Uniform);
    push("out_b1".into(), 1, d, Init::Zero);
    push("out_w2".into(), d, head_out, Init::Uniform);
    push("out_b2".into(), 1, head_out, Init::Zero);
    push("corr_w1".into(), 2 * d, d, Init::Uniform);
    push("corr_b1".into(), 1, d, Init::Zero);
    push("corr_w2".into(), d, 1, Init::Uniform);
    push("corr_b2".into(), 1, 1, Init::Zero);
    specs2
}

impl RouterParams {
    /// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(cfg: &RouterConfig, seed: u64) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layout(cfg)
            .into_iter()
            .map(|s| {
                let n = s.rows * s.cols;
                let data = match s.init {
                    Init::Zero => vec![0.0; n],
                    Init::Uniform => {
                        let bound = 1.0 / (s.rows as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                ParamBlock {
                    name: s.name,
                    tensor: Tensor::matrix(s.rows, s.cols, data).expect("layout shapes"),
                }
            })
            .collect();
        Ok(Self { blocks })
    }

    /// Checks that the block names and shapes match `cfg`'s layout.
    pub fn check(&self, cfg: &RouterConfig) -> Result<(), NetworkError> {
        let specs = layout(cfg);
        if specs.len() != self.blocks.len() {
            return Err(NetworkError::Config(format!(
                "expected {} parameter blocks, found {}",
                specs.len(),
                self.blocks.len()
            )));
        }
        for (s, b) in specs.iter().zip(&self.blocks) {
            if s.name != b.name || b.tensor.shape() != [s.rows, s.cols] {
                return Err(NetworkError::Config(format!(
                    "block {} has shape {:?}, expected {} {}x{}",
                    b.name,
                    b.tensor.shape(),
                    s.name,
                    s.rows,
                    s.cols
                )));
            }
            if !b.tensor.is_finite() {
                return Err(NetworkError::Config(format!("block {} is not finite", b.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.blocks.iter_mut().find(|b| b.name == name).map(|b| &mut b.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.tensor.numel()).sum()
    }

    /// Records every block on `tape`; with `trainable` the blocks become
    /// gradient leaves.
    pub fn attach(&self, tape: &mut Tape, cfg: &RouterConfig, trainable: bool) -> Result<ParamVars, NetworkError> {
        let mut vars = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (r, c) = b.tensor.dims2()?;
            let data = b.tensor.data().to_vec();
            vars.push(if trainable {
                tape.param(r, c, data)?
            } else {
                tape.constant(r, c, data)?
            });
        }
        let mut it = self.blocks.iter().map(|b| b.name.as_str()).zip(vars.iter().copied());
        let mut next = |expected: &str| -> Result<Var, NetworkError> {
            match it.next() {
                Some((name, v)) if name == expected => Ok(v),
                other => Err(NetworkError::Config(format!(
                    "parameter layout mismatch: expected {expected}, found {:?}",
                    other.map(|o| o.0)
                ))),
            }
        };
        let image_proj = next("image_proj")?;
        let question_proj = next("question_proj")?;
        let capsule = if cfg.variant.capsules {
            Some(CapsuleVars {
                queries: next("capsule_queries")?,
                key: next("capsule_key")?,
                value: next("capsule_value")?,
            })
        } else {
            None
        };
        let slot_tokens = if cfg.variant.model_tokens {
            None
        } else {
            Some(next("slot_tokens")?)
        };
        let token = if cfg.variant.model_tokens {
            Some((next("token_proj")?, next("token_bias")?))
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.comm_layers);
        for h in 0..cfg.comm_layers {
            let mut n = |s: &str| next(&format!("layer{h}.{s}"));
            layers.push(LayerVars {
                read_q: n("read_q")?,
                read_k: n("read_k")?,
                read_v: n("read_v")?,
                ffn_w1: n("ffn_w1")?,
                ffn_b1: n("ffn_b1")?,
                ffn_w2: n("ffn_w2")?,
                ffn_b2: n("ffn_b2")?,
                psi_self: n("psi_self")?,
                psi_other: n("psi_other")?,
                psi_diff: n("psi_diff")?,
                psi_prod: n("psi_prod")?,
                psi_b1: n("psi_b1")?,
                psi_w2: n("psi_w2")?,
                psi_b2: n("psi_b2")?,
                self_q: n("self_q")?,
                self_k: n("self_k")?,
                self_v: n("self_v")?,
                score_w1: n("score_w1")?,
                score_b1: n("score_b1")?,
                score_w2: n("score_w2")?,
                score_b2: n("score_b2")?,
                fb_q: n("fb_q")?,
                fb_k: n("fb_k")?,
                fb_v: n("fb_v")?,
            });
        }
        let outcome = Mlp2 {
            w1: next("out_w1")?,
            b1: next("out_b1")?,
            w2: next("out_w2")?,
            b2: next("out_b2")?,
        };
        let correction = Mlp2 {
            w1: next("corr_w1")?,
            b1: next("corr_b1")?,
            w2: next("corr_w2")?,
            b2: next("corr_b2")?,
        };
        Ok(ParamVars {
            all: vars,
            image_proj,
            question_proj,
            capsule,
            slot_tokens,
            token,
            layers,
            outcome,
            correction,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CapsuleVars {
    pub queries: Var,
    pub key: Var,
    pub value: Var,
}

/// `tanh(x w1 + b1) w2 + b2`
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub read_q: Var,
    pub read_k: Var,
    pub read_v: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub psi_self: Var,
    pub psi_other: Var,
    pub psi_diff: Var,
    pub psi_prod: Var,
    pub psi_b1: Var,
    pub psi_w2: Var,
    pub psi_b2: Var,
    pub self_q: Var,
    pub self_k: Var,
    pub self_v: Var,
    pub score_w1: Var,
    pub score_b1: Var,
    pub score_w2: Var,
    pub score_b2: Var,
    pub fb_q: Var,
    pub fb_k: Var,
    pub fb_v: Var,
}

/// Parameter blocks recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    /// Same order as [`RouterParams::blocks`].
    pub all: Vec<Var>,
    pub image_proj: Var,
    pub question_proj: Var,
    pub capsule: Option<CapsuleVars>,
    pub slot_tokens: Option<Var>,
    pub token: Option<(Var, Var)>,
    pub layers: Vec<LayerVars>,
    pub outcome: Mlp2,
    pub correction: Mlp2,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchVariant;

    fn cfg() -> RouterConfig {
        RouterConfig::for_data(6, 5, 9, 4)
    }

    #[test]
    fn init_is_seeded_and_consistent() {
        let c = cfg();
        let a = RouterParams::init(&c, 7).unwrap();
        let b = RouterParams::init(&c, 7).unwrap();
        let other = RouterParams::init(&c, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        a.check(&c).unwrap();
        let bias = a.get("out_b1").unwrap();
        assert!(bias.data().iter().all(|v| *v == 0.0));
        let w = a.get("layer0.read_q").unwrap();
        let bound = 1.0 / (c.hidden_dim as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn layout_tracks_variants() {
        let mut c = cfg();
        c.comm_layers = 0;
        c.variant = ArchVariant {
            capsules: false,
            model_tokens: false,
            distributional: false,
        };
        let p = RouterParams::init(&c, 1).unwrap();
        assert!(p.get("capsule_queries").is_none());
        assert!(p.get("token_proj").is_none());
        assert_eq!(p.get("slot_tokens").unwrap().shape(), &[4, c.hidden_dim]);
        assert_eq!(p.get("out_w1").unwrap().shape(), &[2 * c.hidden_dim, c.hidden_dim]);
        assert_eq!(p.get("out_w2").unwrap().shape(), &[c.hidden_dim, 1]);
        assert!(p.check(&cfg()).is_err());
    }

    #[test]
    fn attach_follows_layout() {
        let c = cfg();
        let p = RouterParams::init(&c, 3).unwrap();
        let mut tape = Tape::new();
        let vars = p.attach(&mut tape, &c, true).unwrap();
        assert_eq!(vars.all.len(), p.blocks.len());
        assert_eq!(vars.layers.len(), c.comm_layers);
        assert_eq!(tape.value(vars.outcome.w1), p.get("out_w1").unwrap().data());
    }
}
