//! Transformer caption decoder over masked encoder features.

use rand::Rng;

use crate::attention::{multi_head, AttendMask, MultiHeadParams};
use crate::autograd::nn::{dropout, positional_table};
use crate::autograd::{Tensor, Var};
use crate::encoder::{FeedForwardParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{Binding, ParamId, ParamStore};
use crate::vocab::{TokenSequence, BOS, EOS, PAD};

/// Self-attention, cross attention and feed-forward, each followed by a
/// residual layer norm.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: MultiHeadParams,
    pub cross_attn: MultiHeadParams,
    pub ff: FeedForwardParams,
    pub norm_self: LayerNormParams,
    pub norm_cross: LayerNormParams,
    pub norm_ff: LayerNormParams,
}

impl DecoderLayerParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_attn: MultiHeadParams::new(store, &format!("{prefix}.self_attn"), d, heads, rng)?,
            cross_attn: MultiHeadParams::new(store, &format!("{prefix}.cross_attn"), d, heads, rng)?,
            ff: FeedForwardParams::new(store, &format!("{prefix}.ff"), d, d_ff, rng),
            norm_self: LayerNormParams::new(store, &format!("{prefix}.norm_self"), d),
            norm_cross: LayerNormParams::new(store, &format!("{prefix}.norm_cross"), d),
            norm_ff: LayerNormParams::new(store, &format!("{prefix}.norm_ff"), d),
        })
    }

    pub fn forward<'t>(
        &self,
        b: &Binding<'t, '_>,
        y: Var<'t>,
        memory: Var<'t>,
        causal: &AttendMask,
        fwd: &mut Forward,
    ) -> Result<Var<'t>> {
        let p = fwd.dropout;
        let train = fwd.train;

        let drop = (train && p > 0.0).then_some((p, &mut fwd.rng as &mut dyn rand::RngCore));
        let s = multi_head(y, y, y, &self.self_attn.bind(b), Some(causal), drop)?;
        let s = dropout(s, p, train, &mut fwd.rng)?;
        let y = self.norm_self.residual(b, s, y)?;

        let drop = (train && p > 0.0).then_some((p, &mut fwd.rng as &mut dyn rand::RngCore));
        let c = multi_head(y, memory, memory, &self.cross_attn.bind(b), None, drop)?;
        let c = dropout(c, p, train, &mut fwd.rng)?;
        let y = self.norm_cross.residual(b, c, y)?;

        let f = self.ff.forward(b, y)?;
        let f = dropout(f, p, train, &mut fwd.rng)?;
        self.norm_ff.residual(b, f, y)
    }
}

#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub embed: ParamId,
    pub out_w: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_words: usize,
    positional: Tensor,
}

impl CaptionDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        layers: usize,
        max_words: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("decoder needs at least one layer"));
        }
        if vocab_size < 4 {
            return Err(Error::config(format!(
                "vocabulary of size {vocab_size} is missing sentinels"
            )));
        }
        let embed = store.add_weight("decoder.embed", &[vocab_size, d_model], vocab_size, d_model, rng);
        let out_w = store.add_weight("decoder.out_w", &[d_model, vocab_size], d_model, vocab_size, rng);
        let layers = (0..layers)
            .map(|l| DecoderLayerParams::new(store, &format!("decoder.layer{l}"), d_model, d_ff, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CaptionDecoder {
            embed,
            out_w,
            layers,
            d_model,
            vocab_size,
            max_words,
            positional: positional_table(max_words + 2, d_model)?,
        })
    }

    /// Index into `[F^0, .., F^L]` attended by decoder layer `layer` (0-based):
    /// the encoder output of the same depth, or the last one if the decoder is deeper.
    pub fn memory_index(layer: usize, memory_len: usize) -> usize {
        (layer + 1).min(memory_len - 1)
    }

    /// Next-word logits `[t x vocab]` for a prefix starting at BOS.
    pub fn decode_forward<'t>(
        &self,
        b: &Binding<'t, '_>,
        prefix: &[usize],
        memory: &[Var<'t>],
        fwd: &mut Forward,
    ) -> Result<Var<'t>> {
        let t = prefix.len();
        if t == 0 || prefix[0] != BOS {
            return Err(Error::contract("decoder prefix must start with BOS"));
        }
        if let Some(&bad) = prefix.iter().find(|&&w| w >= self.vocab_size) {
            return Err(Error::contract(format!(
                "token {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        if t > self.positional.rows() {
            return Err(Error::contract(format!(
                "prefix of {t} tokens exceeds the maximum caption length"
            )));
        }
        if memory.len() < 2 {
            return Err(Error::contract(
                "decoder needs the masked input and at least one encoder layer",
            ));
        }
        let d = self.d_model;
        let words = b.get(self.embed).gather_rows(prefix)?;
        let pe = Tensor::new(vec![t, d], self.positional.data()[..t * d].to_vec())?;
        let mut y = words.add(b.tape().constant(pe))?;
        let causal = AttendMask::causal(t)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let m = memory[Self::memory_index(l, memory.len())];
            y = layer.forward(b, y, m, &causal, fwd)?;
        }
        y.matmul(b.get(self.out_w))
    }

    /// Argmax decoding from BOS until EOS or `max_words` words. BOS and PAD
    /// are never emitted; EOS is appended when the limit is hit.
    pub fn greedy_decode<'t>(
        &self,
        b: &Binding<'t, '_>,
        memory: &[Var<'t>],
        max_words: usize,
    ) -> Result<TokenSequence> {
        let mut seq = vec![BOS];
        let mut fwd = Forward::eval();
        while seq.len() <= max_words {
            let logits = self.decode_forward(b, &seq, memory, &mut fwd)?;
            let next = logits.with_value(|v| argmax_word(v.row(seq.len() - 1)));
            seq.push(next);
            if next == EOS {
                return TokenSequence::new(seq);
            }
        }
        seq.push(EOS);
        TokenSequence::new(seq)
    }
}

/// Highest-scoring index other than BOS and PAD; ties go to the lowest index.
pub fn argmax_word(row: &[f64]) -> usize {
    let mut best = EOS;
    for (i, v) in row.iter().enumerate() {
        if i == BOS || i == PAD {
            continue;
        }
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Shifts a ground-truth caption into decoder input and next-word targets.
pub fn teacher_forced_loss_inputs(gt: &TokenSequence) -> (Vec<usize>, Vec<usize>) {
    let ids = gt.indices();
    (ids[..ids.len() - 1].to_vec(), ids[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::scaled_dot_attention;
    use crate::autograd::nn::linear;
    use crate::autograd::Tape;
    use crate::encoder::LAYER_NORM_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: usize = 9;
    const D: usize = 8;

    fn setup(layers: usize, heads: usize) -> (ParamStore, CaptionDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dec = CaptionDecoder::new(&mut store, V, D, 16, heads, layers, 6, &mut rng).unwrap();
        (store, dec)
    }

    fn memory(tape: &Tape, n: usize) -> Vec<Var<'_>> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|_| {
                tape.constant(
                    Tensor::new(
                        vec![5, D],
                        (0..5 * D).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn shift_examples() {
        let gt = TokenSequence::new(vec![BOS, 5, 6, EOS]).unwrap();
        assert_eq!(
            teacher_forced_loss_inputs(&gt),
            (vec![BOS, 5, 6], vec![5, 6, EOS])
        );
        let empty = TokenSequence::new(vec![BOS, EOS]).unwrap();
        assert_eq!(teacher_forced_loss_inputs(&empty), (vec![BOS], vec![EOS]));
    }

    #[test]
    fn logits_shape_and_simplex() {
        let (store, dec) = setup(2, 2);
        let tape = Tape::new();
        let b = Binding::new(&tape, &store);
        let mem = memory(&tape, 3);
        let logits = dec
            .decode_forward(&b, &[BOS, 4, 7], &mem, &mut Forward::eval())
            .unwrap();
        assert_eq!(logits.shape(), vec![3, V]);
        let p = logits.softmax().unwrap().value();
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocabulary_token_is_contract_error() {
        let (store, dec) = setup(1, 1);
        let tape = Tape::new();
        let b = Binding::new(&tape, &store);
        let mem = memory(&tape, 2);
        assert!(matches!(
            dec.decode_forward(&b, &[BOS, V], &mem, &mut Forward::eval()),
            Err(Error::Contract(_))
        ));
        assert!(dec.decode_forward(&b, &[4], &mem, &mut Forward::eval()).is_err());
    }

    #[test]
    fn memory_pairing() {
        assert_eq!(CaptionDecoder::memory_index(0, 3), 1);
        assert_eq!(CaptionDecoder::memory_index(1, 3), 2);
        assert_eq!(CaptionDecoder::memory_index(4, 3), 2);
    }

    #[test]
    fn zero_cross_attention_reduces_to_language_model() {
        oracle_case(&Tape::new());
    }

    fn oracle_case<'t>(tape: &'t Tape) {
        let (mut store, dec) = setup(1, 1);
        let layer = dec.layers[0];
        store.set(layer.cross_attn.wo, Tensor::zeros(&[D, D])).unwrap();
        let prefix = [BOS, 3, 8, 5];
        let b = Binding::new(tape, &store);
        let mem = memory(tape, 2);
        let got = dec
            .decode_forward(&b, &prefix, &mem, &mut Forward::eval())
            .unwrap()
            .value();

        // Hand composition without any cross-attention term.
        let c = |t: Tensor| tape.constant(t);
        let v = |id| c(store.value(id).clone());
        let t = prefix.len();
        let pe = positional_table(t, D).unwrap();
        let y = c(store.value(dec.embed).clone())
            .gather_rows(&prefix)
            .unwrap()
            .add(c(pe))
            .unwrap();
        let causal = AttendMask::causal(t).unwrap();
        let a = scaled_dot_attention(
            y.matmul(v(layer.self_attn.wq)).unwrap(),
            y.matmul(v(layer.self_attn.wk)).unwrap(),
            y.matmul(v(layer.self_attn.wv)).unwrap(),
            Some(&causal),
        )
        .unwrap()
        .matmul(v(layer.self_attn.wo))
        .unwrap();
        let ln =
            |x: Var<'t>, n: &LayerNormParams| x.layer_norm(v(n.gain), v(n.bias), LAYER_NORM_EPS).unwrap();
        let y1 = ln(a.add(y).unwrap(), &layer.norm_self);
        let y2 = ln(y1, &layer.norm_cross);
        let h = linear(y2, v(layer.ff.w1), Some(v(layer.ff.b1))).unwrap().relu();
        let f = linear(h, v(layer.ff.w2), Some(v(layer.ff.b2))).unwrap();
        let y3 = ln(f.add(y2).unwrap(), &layer.norm_ff);
        let want = y3.matmul(v(dec.out_w)).unwrap().value();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let (store, dec) = setup(2, 2);
        let tape = Tape::new();
        let b = Binding::new(&tape, &store);
        let mem = memory(&tape, 3);
        let a = dec
            .decode_forward(&b, &[BOS, 4, 5, 6, 7], &mem, &mut Forward::eval())
            .unwrap()
            .value();
        let z = dec
            .decode_forward(&b, &[BOS, 4, 8, 3, 3], &mem, &mut Forward::eval())
            .unwrap()
            .value();
        for r in 0..2 {
            assert_eq!(a.row(r), z.row(r));
        }
        assert_ne!(a.row(2), z.row(2));
    }

    #[test]
    fn eos_biased_model_emits_empty_caption() {
        let (mut store, dec) = setup(1, 1);
        let mut w = Tensor::zeros(&[D, V]);
        for r in 0..D {
            w.data_mut()[r * V + EOS] = 1.0;
        }
        store.set(dec.out_w, w).unwrap();
        // Layer norm output has unit-variance rows, so push the whole decoder
        // output into a positive constant direction through the final bias.
        let layer = dec.layers[0];
        store.set(layer.norm_ff.gain, Tensor::zeros(&[D])).unwrap();
        store.set(layer.norm_ff.bias, Tensor::filled(&[D], 1.0)).unwrap();
        let tape = Tape::new();
        let b = Binding::new(&tape, &store);
        let mem = memory(&tape, 2);
        let seq = dec.greedy_decode(&b, &mem, 6).unwrap();
        assert_eq!(seq.indices(), &[BOS, EOS]);
    }

    #[test]
    fn greedy_respects_length_cap() {
        let (store, dec) = setup(2, 2);
        let tape = Tape::new();
        let b = Binding::new(&tape, &store);
        let mem = memory(&tape, 3);
        for cap in [0, 1, 3, 6] {
            let seq = dec.greedy_decode(&b, &mem, cap).unwrap();
            assert!(seq.len() <= cap + 2);
        }
    }
}
