//! The assembled network: encoder, proposal head, mask network and caption decoder
//! sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tensor, Var};
use crate::decoder::CaptionDecoder;
use crate::encoder::VideoEncoder;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::mask::{bin_mask, gated_mask, MaskNetwork};
use crate::params::{Binding, ParamStore};
use crate::proposal::{
    anchor_to_boundaries, boundary_vars, EventProposal, ProposalHead, ProposalOutput, ProposalScores,
};
use crate::vocab::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub window: usize,
    pub d_in: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub kernels: Vec<usize>,
    pub stride_factor: usize,
    pub positional_encoding: bool,
    pub max_caption_words: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 64,
            d_in: 16,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            kernels: vec![4, 8, 16, 32, 48],
            stride_factor: 8,
            positional_encoding: true,
            max_caption_words: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("stride_factor", self.stride_factor),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config("d_model must be even"));
        }
        if self.kernels.is_empty() {
            return Err(Error::config("kernels must list at least one size"));
        }
        Ok(())
    }
}

/// Encoder outputs of one forward pass over a video window.
pub struct Encoded<'t> {
    /// Input embedding `F^0`.
    pub input: Var<'t>,
    /// `F^1 .. F^L`.
    pub layers: Vec<Var<'t>>,
}

impl<'t> Encoded<'t> {
    pub fn last(&self) -> Var<'t> {
        *self.layers.last().expect("encoder has at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: VideoEncoder,
    pub proposal: ProposalHead,
    pub mask: MaskNetwork,
    pub decoder: CaptionDecoder,
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = VideoEncoder::new(
            &mut store,
            c.window,
            c.d_in,
            c.d_model,
            c.d_ff,
            c.heads,
            c.encoder_layers,
            c.positional_encoding,
            &mut rng,
        )?;
        let proposal = ProposalHead::new(
            &mut store,
            c.window,
            c.d_model,
            &c.kernels,
            c.stride_factor,
            &mut rng,
        )?;
        let mask = MaskNetwork::new(&mut store, c.d_model, c.window, &mut rng)?;
        let decoder = CaptionDecoder::new(
            &mut store,
            vocab_size,
            c.d_model,
            c.d_ff,
            c.heads,
            c.decoder_layers,
            c.max_caption_words,
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            encoder,
            proposal,
            mask,
            decoder,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size
    }

    pub fn check_frames(&self, frames: &Tensor) -> Result<()> {
        let want = [self.config.window, self.config.d_in];
        if frames.shape() != want {
            return Err(Error::shape("video features", frames.shape(), &want));
        }
        Ok(())
    }

    pub fn encode<'t>(&self, b: &Binding<'t, '_>, frames: &Tensor, fwd: &mut Forward) -> Result<Encoded<'t>> {
        self.check_frames(frames)?;
        let input = self.encoder.embed_input(b, frames, fwd)?;
        let layers = self.encoder.encode(b, input, fwd)?;
        Ok(Encoded { input, layers })
    }

    pub fn score_anchors<'t>(
        &self,
        b: &Binding<'t, '_>,
        encoded: &Encoded<'t>,
        fwd: &mut Forward,
    ) -> Result<ProposalScores<'t>> {
        self.proposal.forward(b, encoded.last(), fwd)
    }

    /// Gated mask for anchor `index` built from the head outputs, returned
    /// together with the pre-sigmoid mask network output and the predicted
    /// boundaries. With `discrete` the mask is the constant `Bin(S_p, E_p)`.
    pub fn proposal_mask<'t>(
        &self,
        b: &Binding<'t, '_>,
        scores: &ProposalScores<'t>,
        index: usize,
        discrete: bool,
        detach_boundaries: bool,
    ) -> Result<ProposalMask<'t>> {
        let anchor = self.proposal.anchors[index];
        let theta_c = scores.offsets.select(&[2 * index])?;
        let theta_l = scores.offsets.select(&[2 * index + 1])?;
        let (start, end) = boundary_vars(theta_c, theta_l, &anchor, self.config.window)?;
        let (s, e) = (start.item(), end.item());
        let tape = b.tape();
        if discrete {
            let hard = tape.constant(Tensor::vector(bin_mask(s, e, self.config.window).values));
            return Ok(ProposalMask {
                mask: hard,
                mask_logits: None,
                start: s,
                end: e,
            });
        }
        let logits = self.mask.logits(b, start, end, &anchor)?;
        let continuous = logits.sigmoid();
        let score = scores.logits.select(&[index])?.sigmoid();
        let mask = gated_mask(score, s, e, continuous)?;
        let mask_logits = if detach_boundaries {
            self.mask.logits(b, start.detach(), end.detach(), &anchor)?
        } else {
            logits
        };
        Ok(ProposalMask {
            mask,
            mask_logits: Some(mask_logits),
            start: s,
            end: e,
        })
    }

    /// Masked encoder re-run followed by next-word logits for `prefix`.
    pub fn caption_logits<'t>(
        &self,
        b: &Binding<'t, '_>,
        encoded: &Encoded<'t>,
        mask: Var<'t>,
        prefix: &[usize],
        fwd: &mut Forward,
    ) -> Result<Var<'t>> {
        let memory = self.encoder.encode_masked(b, encoded.input, mask, fwd)?;
        self.decoder.decode_forward(b, prefix, &memory, fwd)
    }

    /// Eval-mode head outputs for every anchor.
    pub fn proposal_outputs(&self, frames: &Tensor) -> Result<Vec<ProposalOutput>> {
        let tape = crate::autograd::Tape::new();
        let b = Binding::new(&tape, &self.store);
        let mut fwd = Forward::eval();
        let enc = self.encode(&b, frames, &mut fwd)?;
        let scores = self.score_anchors(&b, &enc, &mut fwd)?;
        Ok(self.proposal.outputs(&scores))
    }

    /// Eval-mode proposals for every anchor, clamped to the window.
    pub fn propose(&self, frames: &Tensor) -> Result<Vec<EventProposal>> {
        Ok(self
            .proposal_outputs(frames)?
            .iter()
            .map(|p| anchor_to_boundaries(p, self.config.window))
            .collect())
    }

    /// Greedy caption of a proposal under its gated mask.
    pub fn caption_proposal(&self, frames: &Tensor, proposal: &EventProposal) -> Result<TokenSequence> {
        let index = self
            .proposal
            .anchors
            .iter()
            .position(|a| *a == proposal.anchor)
            .ok_or_else(|| Error::contract("proposal anchor is not part of this model's grid"))?;
        let tape = crate::autograd::Tape::new();
        let b = Binding::new(&tape, &self.store);
        let mut fwd = Forward::eval();
        let enc = self.encode(&b, frames, &mut fwd)?;
        let scores = self.score_anchors(&b, &enc, &mut fwd)?;
        let pm = self.proposal_mask(&b, &scores, index, false, false)?;
        let memory = self.encoder.encode_masked(&b, enc.input, pm.mask, &mut fwd)?;
        self.decoder
            .greedy_decode(&b, &memory, self.config.max_caption_words)
    }

    /// Greedy caption of a given segment under its binary mask.
    pub fn caption_segment(&self, frames: &Tensor, start: f64, end: f64) -> Result<TokenSequence> {
        let tape = crate::autograd::Tape::new();
        let b = Binding::new(&tape, &self.store);
        let mut fwd = Forward::eval();
        self.check_frames(frames)?;
        let input = self.encoder.embed_input(&b, frames, &mut fwd)?;
        let mask = tape.constant(Tensor::vector(bin_mask(start, end, self.config.window).values));
        let memory = self.encoder.encode_masked(&b, input, mask, &mut fwd)?;
        self.decoder
            .greedy_decode(&b, &memory, self.config.max_caption_words)
    }
}

/// Mask for one proposal with its predicted boundaries.
pub struct ProposalMask<'t> {
    pub mask: Var<'t>,
    /// Mask network output before the sigmoid; absent for discrete masks.
    pub mask_logits: Option<Var<'t>>,
    pub start: f64,
    pub end: f64,
}
