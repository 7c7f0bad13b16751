use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, PoolingMode};
use crate::autograd::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncatedNormal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

struct SpecBuilder<'c> {
    cfg: &'c ModelConfig,
    specs: Vec<ParamSpec>,
}

impl SpecBuilder<'_> {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) {
        let std = self.cfg.init_std;
        self.add(name, (rows, cols), Init::TruncatedNormal(std));
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        self.weight(format!("{prefix}.w"), input, output);
        self.add(format!("{prefix}.b"), (1, output), Init::Zeros);
    }

    fn norm(&mut self, prefix: &str) {
        let d = self.cfg.d_model;
        self.add(format!("{prefix}.g"), (1, d), Init::Ones);
        self.add(format!("{prefix}.b"), (1, d), Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, cross: bool) {
        let d = self.cfg.d_model;
        self.norm(&format!("{prefix}.norm_q"));
        if cross {
            self.norm(&format!("{prefix}.norm_kv"));
        }
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{proj}"), d, d);
        }
    }

    fn ffn(&mut self, prefix: &str) {
        let (d, f) = (self.cfg.d_model, self.cfg.ffn_width());
        self.norm(&format!("{prefix}.norm"));
        self.linear(&format!("{prefix}.fc1"), d, f);
        self.linear(&format!("{prefix}.fc2"), f, d);
    }
}

/// Every learnable tensor the configuration needs, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut b = SpecBuilder { cfg, specs: Vec::new() };

    b.linear("video_in", cfg.input_dim, d);
    if cfg.video_temporal_mixing {
        b.weight("video_mix.prev".into(), d, d);
        b.weight("video_mix.next".into(), d, d);
    }
    b.weight("text.token_emb".into(), cfg.vocab_size, d);
    b.weight("text.pos_emb".into(), cfg.max_text_tokens, d);

    if cfg.cmfe_enabled {
        for l in 0..cfg.cmfe_layers {
            b.attention(&format!("cmfe.{l}.video_self"), false);
            b.attention(&format!("cmfe.{l}.text_self"), false);
            b.attention(&format!("cmfe.{l}.t2v"), true);
            b.attention(&format!("cmfe.{l}.v2t"), true);
            b.ffn(&format!("cmfe.{l}.video_ffn"));
            b.ffn(&format!("cmfe.{l}.text_ffn"));
        }
    }
    for l in 0..cfg.fpn_levels {
        b.attention(&format!("fpn.{l}.attn"), false);
        b.ffn(&format!("fpn.{l}.ffn"));
    }
    if cfg.pooling == PoolingMode::Attentive {
        b.weight("qwp.attn_query".into(), 1, d);
    }
    if cfg.tgfd_enabled {
        for l in 0..cfg.tgfd_layers {
            b.attention(&format!("tgfd.{l}.cross"), true);
            b.attention(&format!("tgfd.{l}.self"), false);
            b.ffn(&format!("tgfd.{l}.ffn"));
        }
    }

    b.norm("head.video_norm");
    b.norm("head.query_norm");
    b.linear("head.cls_proj", d, d);
    let prior = cfg.prior_prob;
    b.add("head.cls_bias".into(), (1, 1), Init::Constant(-((1.0 - prior) / prior).ln()));
    b.linear("head.reg_fc1", d, d);
    b.linear("head.reg_fc2", d, 2);
    b.specs
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let m = match spec.init {
                Init::TruncatedNormal(std) => {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    Matrix::from_shape_simple_fn(spec.shape, || loop {
                        let z: f64 = normal.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                }
                Init::Zeros => Matrix::zeros(spec.shape),
                Init::Ones => Matrix::ones(spec.shape),
                Init::Constant(v) => Matrix::from_elem(spec.shape, v),
            };
            tensors.insert(spec.name, m);
        }
        ParamStore { tensors }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Matrix>) -> Self {
        ParamStore { tensors }
    }

    /// Checks that names and shapes are exactly those the configuration needs.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                None => {
                    return Err(Error::ConfigMismatch(format!("missing parameter `{}`", spec.name)))
                }
                Some(m) if m.dim() != spec.shape => {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter `{}` has shape {:?}, config expects {:?}",
                        spec.name,
                        m.dim(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if specs.len() != self.tensors.len() {
            let expected: std::collections::BTreeSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::ConfigMismatch(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn init_matches_specs_and_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ParamStore::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = ParamStore::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        a.check_against(&cfg).unwrap();
        let w = a.get("fpn.0.attn.q.w").unwrap();
        assert!(w.iter().all(|v| v.abs() <= 2.0 * cfg.init_std));
        let bias = a.get("head.cls_bias").unwrap()[[0, 0]];
        assert!((bias + 99f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn toggles_change_the_parameter_set() {
        let full = ModelConfig::default();
        let params = ParamStore::init(&full, &mut ChaCha8Rng::seed_from_u64(0));
        let ablated = ModelConfig {
            cmfe_enabled: false,
            ..full.clone()
        };
        assert!(params.check_against(&ablated).is_err());
        let attentive = ModelConfig {
            pooling: PoolingMode::Attentive,
            ..full
        };
        assert!(params.check_against(&attentive).is_err());
    }
}
