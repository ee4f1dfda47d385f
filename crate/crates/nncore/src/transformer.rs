//! Post-norm transformer encoder/decoder with learned absolute positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::float::Float;
use crate::graph::{AttnSegment, Graph, Var};
use crate::layers::{Embedding, LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            hidden: 300,
            heads: 2,
            ffn: 300,
            max_len: 256,
            dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.max_len == 0 {
            return invalid(format!("transformer dims must be >= 1: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return invalid(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Several token sequences packed row-wise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut b = SeqBatch::default();
        for s in seqs {
            b.push(s.as_ref());
        }
        b
    }

    pub fn push(&mut self, seq: &[usize]) {
        self.starts.push(self.ids.len());
        self.lens.push(seq.len());
        self.ids.extend_from_slice(seq);
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn total(&self) -> usize {
        self.ids.len()
    }

    pub fn seq(&self, i: usize) -> &[usize] {
        &self.ids[self.starts[i]..self.starts[i] + self.lens[i]]
    }

    /// Position of every packed token within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }

    fn self_segments(&self, causal: bool) -> Vec<AttnSegment> {
        self.starts
            .iter()
            .zip(&self.lens)
            .filter(|(_, &l)| l > 0)
            .map(|(&s, &l)| AttnSegment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
                causal,
            })
            .collect()
    }

    fn cross_segments(&self, memory: &SeqBatch) -> Vec<AttnSegment> {
        (0..self.len())
            .filter(|&i| self.lens[i] > 0)
            .map(|i| AttnSegment {
                q_start: self.starts[i],
                q_len: self.lens[i],
                k_start: memory.starts[i],
                k_len: memory.lens[i],
                causal: false,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, memory: Var, segs: &[AttnSegment]) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let a = g.attention(q, k, v, self.heads, segs)?;
        self.o.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, ffn: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), d, ffn, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), ffn, d, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        self.l2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

// x <- LN(x + dropout(f(x)))
fn residual<T: Float>(g: &mut Graph<'_, T>, x: Var, fx: Var, ln: &LayerNorm, p: f64) -> Result<Var> {
    let fx = g.dropout(fx, p);
    let s = g.add(x, fx)?;
    ln.forward(g, s)
}

fn check_lengths(batch: &SeqBatch, max_len: usize) -> Result<()> {
    if let Some(&l) = batch.lens.iter().find(|&&l| l > max_len) {
        return invalid(format!("sequence of length {l} exceeds max length {max_len}"));
    }
    Ok(())
}

/// Encoder stack. The token embedding is passed in so it can be shared.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: TransformerConfig,
    pub pos: Embedding,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, config: &TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let pos = Embedding::new(store, &format!("{name}.pos"), config.max_len, d, rng)?;
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let p = format!("{name}.layer{l}");
            layers.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, config.heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ffn, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
            });
        }
        Ok(Encoder {
            config: config.clone(),
            pos,
            layers,
        })
    }

    /// Per-position hidden states, `batch.total() x hidden`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, tok: &Embedding, batch: &SeqBatch) -> Result<Var> {
        check_lengths(batch, self.config.max_len)?;
        if batch.total() == 0 {
            return invalid("empty encoder batch");
        }
        let p = self.config.dropout;
        let e = tok.forward(g, &batch.ids)?;
        let pe = self.pos.forward(g, &batch.positions())?;
        let mut x = g.add(e, pe)?;
        x = g.dropout(x, p);
        let segs = batch.self_segments(false);
        for layer in &self.layers {
            let a = layer.attn.forward(g, x, x, &segs)?;
            x = residual(g, x, a, &layer.ln1, p)?;
            let f = layer.ff.forward(g, x, p)?;
            x = residual(g, x, f, &layer.ln2, p)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: TransformerConfig,
    pub pos: Embedding,
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, config: &TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let pos = Embedding::new(store, &format!("{name}.pos"), config.max_len, d, rng)?;
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let p = format!("{name}.layer{l}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, config.heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                cross: MultiHeadAttention::new(store, &format!("{p}.cross"), d, config.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ffn, rng)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
            });
        }
        Ok(Decoder {
            config: config.clone(),
            pos,
            layers,
        })
    }

    /// Causal decoder states for `prefix`, attending to `memory` (the
    /// encoder output for `memory_batch`). Sequence `i` of the prefix batch
    /// attends to sequence `i` of the memory batch.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        tok: &Embedding,
        prefix: &SeqBatch,
        memory: Var,
        memory_batch: &SeqBatch,
    ) -> Result<Var> {
        check_lengths(prefix, self.config.max_len)?;
        if prefix.len() != memory_batch.len() {
            return invalid(format!(
                "{} decoder sequences for {} encoder sequences",
                prefix.len(),
                memory_batch.len()
            ));
        }
        if prefix.total() == 0 {
            return invalid("empty decoder batch");
        }
        let p = self.config.dropout;
        let e = tok.forward(g, &prefix.ids)?;
        let pe = self.pos.forward(g, &prefix.positions())?;
        let mut x = g.add(e, pe)?;
        x = g.dropout(x, p);
        let self_segs = prefix.self_segments(true);
        let cross_segs = prefix.cross_segments(memory_batch);
        for layer in &self.layers {
            let a = layer.self_attn.forward(g, x, x, &self_segs)?;
            x = residual(g, x, a, &layer.ln1, p)?;
            let c = layer.cross.forward(g, x, memory, &cross_segs)?;
            x = residual(g, x, c, &layer.ln2, p)?;
            let f = layer.ff.forward(g, x, p)?;
            x = residual(g, x, f, &layer.ln3, p)?;
        }
        Ok(x)
    }
}

/// Encoder-decoder with a shared token embedding and an output projection
/// onto the full token space.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: TransformerConfig,
    pub vocab_size: usize,
    pub tok: Embedding,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub out: Linear,
}

impl Seq2Seq {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        config: &TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return invalid("empty vocabulary");
        }
        let tok = Embedding::new(store, &format!("{name}.tok"), vocab_size, config.hidden, rng)?;
        let encoder = Encoder::new(store, &format!("{name}.enc"), config, rng)?;
        let decoder = Decoder::new(store, &format!("{name}.dec"), config, rng)?;
        let out = Linear::new(store, &format!("{name}.out"), config.hidden, vocab_size, true, rng)?;
        Ok(Seq2Seq {
            config: config.clone(),
            vocab_size,
            tok,
            encoder,
            decoder,
            out,
        })
    }

    fn check_ids(&self, batch: &SeqBatch) -> Result<()> {
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.vocab_size) {
            return invalid(format!("token id {id} outside vocabulary of {}", self.vocab_size));
        }
        Ok(())
    }

    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>, src: &SeqBatch) -> Result<Var> {
        self.check_ids(src)?;
        self.encoder.forward(g, &self.tok, src)
    }

    /// Decoder hidden states before the output projection.
    pub fn decode_hidden<T: Float>(&self, g: &mut Graph<'_, T>, prefix: &SeqBatch, memory: Var, src: &SeqBatch) -> Result<Var> {
        self.check_ids(prefix)?;
        self.decoder.forward(g, &self.tok, prefix, memory, src)
    }

    /// Next-token logits over the full token space, one row per prefix position.
    pub fn decode<T: Float>(&self, g: &mut Graph<'_, T>, prefix: &SeqBatch, memory: Var, src: &SeqBatch) -> Result<Var> {
        let h = self.decode_hidden(g, prefix, memory, src)?;
        self.out.forward(g, h)
    }

    pub fn logits<T: Float>(&self, g: &mut Graph<'_, T>, src: &SeqBatch, prefix: &SeqBatch) -> Result<Var> {
        let m = self.encode(g, src)?;
        self.decode(g, prefix, m, src)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            max_len: 10,
            dropout: 0.1,
        }
    }

    fn model() -> (ParamStore<f64>, Seq2Seq) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Seq2Seq::new(&mut store, "m", 12, &tiny(), &mut rng).unwrap();
        (store, m)
    }

    fn run(store: &ParamStore<f64>, m: &Seq2Seq, src: &[usize], prefix: &[usize]) -> Tensor<f64> {
        let mut g = Graph::new(store);
        let v = m
            .logits(&mut g, &SeqBatch::new(&[src]), &SeqBatch::new(&[prefix]))
            .unwrap();
        g.value(v).clone()
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(TransformerConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(TransformerConfig { layers: 0, ..tiny() }.validate().is_err());
        assert!(TransformerConfig { ffn: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let (store, m) = model();
        let a = run(&store, &m, &[1, 2, 3], &[4, 5, 6, 7]);
        let b = run(&store, &m, &[1, 2, 3], &[4, 5, 9, 11]);
        for t in 0..2 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, m) = model();
        assert_eq!(run(&store, &m, &[1, 2], &[3, 4]), run(&store, &m, &[1, 2], &[3, 4]));
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let (store, m) = model();
        let mut g = Graph::new(&store);
        let src = SeqBatch::new(&[vec![1, 2, 3], vec![4, 5]]);
        let pre = SeqBatch::new(&[vec![6], vec![7, 8, 9]]);
        let v = m.logits(&mut g, &src, &pre).unwrap();
        let packed = g.value(v).clone();
        let a = run(&store, &m, &[1, 2, 3], &[6]);
        let b = run(&store, &m, &[4, 5], &[7, 8, 9]);
        for (i, row) in a.data().chunks(12).chain(b.data().chunks(12)).enumerate() {
            for (x, y) in packed.row(i).iter().zip(row) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let (store, m) = model();
        let mut g = Graph::new(&store);
        let long: Vec<usize> = (0..11).map(|i| i % 12).collect();
        assert!(m.logits(&mut g, &SeqBatch::new(&[long.clone()]), &SeqBatch::new(&[vec![1]])).is_err());
        assert!(m.logits(&mut g, &SeqBatch::new(&[vec![1]]), &SeqBatch::new(&[long])).is_err());
    }

    #[test]
    fn out_of_vocabulary_ids_are_rejected() {
        let (store, m) = model();
        let mut g = Graph::new(&store);
        assert!(m.logits(&mut g, &SeqBatch::new(&[vec![12]]), &SeqBatch::new(&[vec![1]])).is_err());
    }

    #[test]
    fn training_mode_applies_dropout() {
        let (store, m) = model();
        let src = SeqBatch::new(&[vec![1, 2, 3]]);
        let pre = SeqBatch::new(&[vec![4, 5]]);
        let mut g1 = Graph::training(&store, 1);
        let v1 = m.logits(&mut g1, &src, &pre).unwrap();
        let mut g2 = Graph::new(&store);
        let v2 = m.logits(&mut g2, &src, &pre).unwrap();
        assert_ne!(g1.value(v1), g2.value(v2));
    }

    // One head, one layer, identity attention projections, zero positions.
    // Without positions the encoder is permutation-equivariant, and the
    // decoder's cross-attention pools over the encoder states as a set, so
    // permuting the source cannot change the logits.
    #[test]
    fn source_order_is_invisible_without_positions() {
        let cfg = TransformerConfig {
            layers: 1,
            hidden: 4,
            heads: 1,
            ffn: 4,
            max_len: 6,
            dropout: 0.0,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Seq2Seq::new(&mut store, "m", 9, &cfg, &mut rng).unwrap();
        let eye = Tensor::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for n in names {
            let id = store.id(&n).unwrap();
            let is_attn_w = [".q.w", ".k.w", ".v.w", ".o.w"].iter().any(|s| n.ends_with(s));
            if is_attn_w {
                store.assign(id, eye.clone()).unwrap();
            } else if n.ends_with(".pos") {
                store.assign(id, Tensor::zeros(&[6, 4])).unwrap();
            }
        }
        let a = run(&store, &m, &[1, 2, 3, 4], &[5, 6]);
        let b = run(&store, &m, &[3, 1, 4, 2], &[5, 6]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Positions on the decoder side are visible, encoder side order is not:
        // restoring encoder positions breaks the symmetry.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = crate::params::normal::<f64>(6, 4, 1.0, &mut rng);
        store.assign(m.encoder.pos.table, pos).unwrap();
        let c = run(&store, &m, &[1, 2, 3, 4], &[5, 6]);
        let d = run(&store, &m, &[3, 1, 4, 2], &[5, 6]);
        assert!(c.data().iter().zip(d.data()).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
