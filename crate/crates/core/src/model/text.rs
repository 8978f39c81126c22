//! Bag-of-tokens text tower.
//!
//! A prompt is split into weighted segments, each segment into lowercase
//! tokens on whitespace. Tokens hash (FNV-1a) into a table of `VOCAB`
//! vectors; the embedding is the weight-averaged token vector passed
//! through a square linear map and normalised.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Checkpoint, CheckpointMeta, ModelError, Result, D_EMB};
use crate::prompts::parse_weighted;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const VOCAB: usize = 4096;
const ARCH: &str = "text-tower";

pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `(bucket, weight)` per token of `prompt`.
pub fn tokenize(prompt: &str) -> Result<Vec<(usize, f32)>> {
    let mut out = Vec::new();
    for (segment, w) in parse_weighted(prompt)? {
        for tok in segment.split_whitespace() {
            out.push(((fnv1a(&tok.to_lowercase()) % VOCAB as u64) as usize, w));
        }
    }
    if out.is_empty() {
        return Err(ModelError::EmptyPrompt(prompt.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTower {
    pub params: ParamStore,
    pub frozen: bool,
}

impl TextTower {
    pub const TOKENS: &'static str = "text.tokens";
    pub const PROJ: &'static str = "text.proj";

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, 1.0).expect("unit normal");
        let tokens = (0..VOCAB * D_EMB).map(|_| n.sample(&mut rng)).collect();
        let proj_n = Normal::new(0.0f32, (1.0 / D_EMB as f32).sqrt()).expect("finite std");
        let proj = (0..D_EMB * D_EMB)
            .map(|_| proj_n.sample(&mut rng))
            .collect();
        let mut params = ParamStore::new();
        params.insert(
            Self::TOKENS,
            Tensor::new([VOCAB, D_EMB], tokens).expect("table"),
        );
        params.insert(Self::PROJ, Tensor::new([D_EMB, D_EMB], proj).expect("proj"));
        Self {
            params,
            frozen: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    /// Binds the tower on `g`; a frozen tower binds as constants.
    pub fn bind(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.params.bind(g, !self.frozen)
    }

    /// Normalised embeddings `(P, D_EMB)` of `prompts` on `g`.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, Var>,
        prompts: &[&str],
    ) -> Result<Var> {
        let toks: Vec<Vec<(usize, f32)>> =
            prompts.iter().map(|s| tokenize(s)).collect::<Result<_>>()?;
        let ids: Vec<usize> = toks.iter().flatten().map(|t| t.0).collect();
        let mut mix = vec![0.0; prompts.len() * ids.len()];
        let mut col = 0;
        for (r, t) in toks.iter().enumerate() {
            let total: f32 = t.iter().map(|x| x.1).sum();
            for &(_, w) in t {
                mix[r * ids.len() + col] = w / total;
                col += 1;
            }
        }
        let rows = g.gather_rows(p[Self::TOKENS], &ids)?;
        let mix = g.constant(Tensor::new([prompts.len(), ids.len()], mix)?);
        let mean = g.matmul(mix, rows)?;
        let z = g.matmul(mean, p[Self::PROJ])?;
        Ok(g.l2_normalize(z)?)
    }

    /// Normalised embedding rows for `prompts`.
    pub fn embed(&self, prompts: &[&str]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = self.embed_graph(&mut g, &p, prompts)?;
        Ok(g.value(z).clone())
    }

    pub fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        Ok(self.embed(&[prompt])?.into_data())
    }

    pub fn to_checkpoint(&self, seed: u64, stage: &str) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                arch: ARCH.into(),
                d_emb: D_EMB,
                seed,
                stage: stage.into(),
                param_count: self.param_count(),
                extra: BTreeMap::from([("frozen".to_string(), self.frozen.to_string())]),
            },
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.arch != ARCH {
            return Err(ModelError::ArchMismatch {
                expected: ARCH.into(),
                found: ckpt.meta.arch.clone(),
            });
        }
        let shapes = vec![
            (Self::PROJ.to_string(), vec![D_EMB, D_EMB]),
            (Self::TOKENS.to_string(), vec![VOCAB, D_EMB]),
        ];
        let params = super::checkpoint::match_params(&ckpt.params, &shapes)?;
        let frozen = ckpt.meta.extra.get("frozen").is_some_and(|v| v == "true");
        Ok(Self { params, frozen })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn deterministic_and_normalised() {
        let t = TextTower::new(3);
        let a = t
            .embed_text("a photo of a ring, which is a type of round shape")
            .unwrap();
        let b = t
            .embed_text("a photo of a ring, which is a type of round shape")
            .unwrap();
        assert_eq!(a, b);
        let n: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unit_weights_match_plain_text() {
        let t = TextTower::new(4);
        let a = t.embed_text("(ring:1.0), (round shape:1.0)").unwrap();
        let b = t.embed_text("ring, round shape").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tokens_are_a_bag_within_a_segment() {
        let t = TextTower::new(5);
        let a = t
            .embed_text("(saint bernard dog:1.5), (garden:1.0)")
            .unwrap();
        let b = t
            .embed_text("(dog saint bernard:1.5), (garden:1.0)")
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        let c = t
            .embed_text("(saint bernard dog:1.0), (garden:1.5)")
            .unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn empty_prompt_errors() {
        let t = TextTower::new(0);
        assert!(t.embed_text("").is_err());
        assert!(t.embed_text(" , ,").is_err());
    }

    #[test]
    fn case_insensitive_tokens() {
        let t = TextTower::new(1);
        assert_eq!(t.embed_text("Ring").unwrap(), t.embed_text("ring").unwrap());
    }
}
