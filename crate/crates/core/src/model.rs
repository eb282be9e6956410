//! The translation network: shared embeddings, 2-layer unidirectional
//! GRU encoder, per-modality additive attention with prefix masking on
//! the text side, hierarchical fusion over the two context vectors,
//! 2-layer conditional GRU decoder, tied output projection.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MSNM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Raw image feature dimension (ResNet pool5 is 2048).
    pub image_dim: usize,
    /// Number of feature vectors per image.
    pub image_seq: usize,
    pub attn_dim: usize,
    pub dropout_src_emb: f64,
    pub dropout_enc_state: f64,
    pub dropout_pre_softmax: f64,
    pub multimodal: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 10_000,
            embed_dim: 200,
            hidden_dim: 400,
            image_dim: 2048,
            image_seq: 1,
            attn_dim: 400,
            dropout_src_emb: 0.4,
            dropout_enc_state: 0.5,
            dropout_pre_softmax: 0.5,
            multimodal: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.image_dim == 0
            || self.image_seq == 0
            || self.attn_dim == 0
        {
            return Err(Error::Domain("all model dimensions must be > 0".into()));
        }
        for r in [
            self.dropout_src_emb,
            self.dropout_enc_state,
            self.dropout_pre_softmax,
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Domain(format!("dropout rate {r} not in [0,1)")));
            }
        }
        Ok(())
    }
}

/// Named learnable tensors in a fixed creation order.
#[derive(Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

fn gru_param_names(prefix: &str) -> Vec<String> {
    ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"]
        .iter()
        .map(|g| format!("{prefix}.{g}"))
        .collect()
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Model<T>> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Contract(format!(
                "vocab has {} entries but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model {
            config,
            vocab,
            names: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
        };
        let (v, e, h, a) = (
            model.config.vocab_size,
            model.config.embed_dim,
            model.config.hidden_dim,
            model.config.attn_dim,
        );
        let d = model.config.image_dim;

        let add = |m: &mut Model<T>, name: String, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let fan: usize = shape.iter().sum();
            let scale = (6.0 / fan as f64).sqrt();
            let t = Tensor::uniform(shape, scale, rng).requires_grad();
            m.index.insert(name.clone(), m.params.len());
            m.names.push(name);
            m.params.push(t);
        };

        add(&mut model, "embedding".into(), vec![v, e], &mut rng);
        for (layer, in_dim) in [("enc.l1", e), ("enc.l2", h), ("dec.l1", e), ("dec.l2", h)] {
            for name in gru_param_names(layer) {
                let shape = if name.contains(".b_") {
                    vec![1, h]
                } else if name.contains(".w_") {
                    vec![in_dim, h]
                } else {
                    vec![h, h]
                };
                add(&mut model, name, shape, &mut rng);
            }
        }
        add(&mut model, "attn.txt.w1".into(), vec![2 * h, a], &mut rng);
        add(&mut model, "attn.txt.b1".into(), vec![1, a], &mut rng);
        add(&mut model, "attn.txt.v".into(), vec![a, 1], &mut rng);
        add(&mut model, "out.w".into(), vec![h, e], &mut rng);
        add(&mut model, "out.b".into(), vec![1, e], &mut rng);
        add(&mut model, "out.bias".into(), vec![1, v], &mut rng);
        if model.config.multimodal {
            add(&mut model, "img.proj.w".into(), vec![d, h], &mut rng);
            add(&mut model, "img.proj.b".into(), vec![1, h], &mut rng);
            add(&mut model, "attn.img.w1".into(), vec![2 * h, a], &mut rng);
            add(&mut model, "attn.img.b1".into(), vec![1, a], &mut rng);
            add(&mut model, "attn.img.v".into(), vec![a, 1], &mut rng);
            add(&mut model, "fusion.w1".into(), vec![2 * h, a], &mut rng);
            add(&mut model, "fusion.b1".into(), vec![1, a], &mut rng);
            add(&mut model, "fusion.v".into(), vec![a, 1], &mut rng);
            add(&mut model, "fusion.w_txt".into(), vec![h, h], &mut rng);
            add(&mut model, "fusion.w_img".into(), vec![h, h], &mut rng);
        }
        Ok(model)
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Copies every parameter whose name also exists in `other`.
    /// Used to share the text path between text-only and multimodal
    /// instances.
    pub fn copy_matching_params(&mut self, other: &Model<T>) {
        for (i, name) in self.names.clone().iter().enumerate() {
            if let Some(src) = other.param(name) {
                self.params[i].data = src.data.clone();
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
        };
        let text = toml::to_string(&header)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        w.write_u32::<LittleEndian>(text.len() as u32)?;
        w.write_all(text.as_bytes())?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, p) in self.names.iter().zip(&self.params) {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(p.shape.len() as u8)?;
            for &d in &p.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &x in &p.data {
                w.write_f32::<LittleEndian>(x.to_f32x())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model<T>> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let text_len = r.read_u32::<LittleEndian>()? as usize;
        let mut text = vec![0u8; text_len];
        r.read_exact(&mut text)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = toml::from_str(
            std::str::from_utf8(&text).map_err(|_| Error::Format("non-UTF-8 header".into()))?,
        )
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let vocab = Vocab::from_tokens(header.vocab)?;
        let mut model = Model::new(header.config, vocab)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameters, model expects {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?;
            let rank = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let idx = *model
                .index
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
            if model.params[idx].shape != shape {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {shape:?}, expected {:?}",
                    model.params[idx].shape
                )));
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let x = r
                    .read_f32::<LittleEndian>()
                    .map_err(|_| Error::Format(format!("truncated payload for {name:?}")))?;
                data.push(T::from_f64(x as f64));
            }
            model.params[idx].data = data;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocab: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Decoder recurrent state, one hidden vector per layer. Initialized
/// to zeros.
pub struct DecoderState {
    pub s1: Var,
    pub s2: Var,
}

/// One forward computation against a model: owns the tape and the
/// per-parameter leaf vars. Dropout draws from a generator seeded by
/// the caller so training steps are reproducible.
pub struct Forward<'m, T: Real> {
    pub model: &'m Model<T>,
    pub tape: Tape<T>,
    vars: Vec<Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    /// When set on a multimodal model, the image branch and fusion are
    /// skipped entirely and the text context is used directly.
    pub ablate_fusion: bool,
}

impl<'m, T: Real> Forward<'m, T> {
    pub fn new(model: &'m Model<T>, mode: Mode, dropout_seed: u64) -> Self {
        let mut tape = Tape::new();
        let vars = model.params.iter().map(|p| tape.leaf(p)).collect();
        Forward {
            model,
            tape,
            vars,
            mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            ablate_fusion: false,
        }
    }

    pub fn eval(model: &'m Model<T>) -> Self {
        Forward::new(model, Mode::Eval, 0)
    }

    pub fn param_var(&self, name: &str) -> Var {
        self.vars[*self.model.index.get(name).expect("unknown parameter")]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Rebinds the pass onto externally created parameter leaves, for
    /// callers (gradient checks) that own the tape.
    pub fn set_param_vars(&mut self, vars: Vec<Var>) {
        assert_eq!(vars.len(), self.model.params.len());
        self.vars = vars;
    }

    fn p(&self, name: &str) -> Var {
        self.param_var(name)
    }

    fn maybe_dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Train && rate > 0.0 {
            let mut rng = self.rng.clone();
            let out = self.tape.dropout(x, rate, &mut rng)?;
            self.rng = rng;
            Ok(out)
        } else {
            Ok(x)
        }
    }

    fn gru_step(&mut self, prefix: &str, x: Var, h: Var) -> Result<Var> {
        let wz = self.p(&format!("{prefix}.w_z"));
        let wr = self.p(&format!("{prefix}.w_r"));
        let wh = self.p(&format!("{prefix}.w_h"));
        let uz = self.p(&format!("{prefix}.u_z"));
        let ur = self.p(&format!("{prefix}.u_r"));
        let uh = self.p(&format!("{prefix}.u_h"));
        let bz = self.p(&format!("{prefix}.b_z"));
        let br = self.p(&format!("{prefix}.b_r"));
        let bh = self.p(&format!("{prefix}.b_h"));
        let t = &mut self.tape;

        let xz = t.matmul(x, wz)?;
        let hz = t.matmul(h, uz)?;
        let z = t.add(xz, hz)?;
        let z = t.add(z, bz)?;
        let z = t.sigmoid(z);

        let xr = t.matmul(x, wr)?;
        let hr = t.matmul(h, ur)?;
        let rg = t.add(xr, hr)?;
        let rg = t.add(rg, br)?;
        let rg = t.sigmoid(rg);

        let xh = t.matmul(x, wh)?;
        let rh = t.mul(rg, h)?;
        let rh = t.matmul(rh, uh)?;
        let cand = t.add(xh, rh)?;
        let cand = t.add(cand, bh)?;
        let cand = t.tanh(cand);

        // h' = (1 - z) ∘ h + z ∘ cand
        let zh = t.mul(z, cand)?;
        let keep = t.mul(z, h)?;
        let keep = t.sub(h, keep)?;
        t.add(keep, zh)
    }

    /// Runs the 2-layer unidirectional encoder; returns one hidden
    /// state var per source position. State j depends only on tokens
    /// 1..=j.
    pub fn encode_source(&mut self, src_ids: &[usize]) -> Result<Vec<Var>> {
        if src_ids.is_empty() {
            return Err(Error::Domain("cannot encode empty source".into()));
        }
        if src_ids.len() > crate::data::MAX_LEN {
            return Err(Error::Domain(format!(
                "source length {} exceeds max {}",
                src_ids.len(),
                crate::data::MAX_LEN
            )));
        }
        let h = self.model.config.hidden_dim;
        let emb_table = self.p("embedding");
        let drop_emb = self.model.config.dropout_src_emb;
        let drop_state = self.model.config.dropout_enc_state;
        let mut h1 = self.tape.constant(vec![1, h], vec![T::zero(); h]);
        let mut h2 = self.tape.constant(vec![1, h], vec![T::zero(); h]);
        let mut states = Vec::with_capacity(src_ids.len());
        for &id in src_ids {
            let emb = self.tape.row(emb_table, id)?;
            let emb = self.maybe_dropout(emb, drop_emb)?;
            h1 = self.gru_step("enc.l1", emb, h1)?;
            h2 = self.gru_step("enc.l2", h1, h2)?;
            let out = self.maybe_dropout(h2, drop_state)?;
            states.push(out);
        }
        Ok(states)
    }

    /// Projects raw image feature vectors into the model space: one
    /// state per feature vector, h = f·W + b.
    pub fn encode_image(&mut self, feature: &[f32]) -> Result<Vec<Var>> {
        let cfg = &self.model.config;
        if !cfg.multimodal {
            return Err(Error::Contract("text-only model has no image branch".into()));
        }
        if feature.len() != cfg.image_seq * cfg.image_dim {
            return Err(Error::Shape(format!(
                "image feature has {} values, expected {}x{}",
                feature.len(),
                cfg.image_seq,
                cfg.image_dim
            )));
        }
        let w = self.p("img.proj.w");
        let b = self.p("img.proj.b");
        let mut states = Vec::with_capacity(cfg.image_seq);
        for chunk in feature.chunks(cfg.image_dim) {
            let data: Vec<T> = chunk.iter().map(|&x| T::from_f64(x as f64)).collect();
            let f = self.tape.constant(vec![1, cfg.image_dim], data);
            let proj = self.tape.matmul(f, w)?;
            let proj = self.tape.add(proj, b)?;
            states.push(proj);
        }
        Ok(states)
    }

    /// Additive attention for one modality: energies from a
    /// feedforward over [query; state], softmax weights, weighted sum.
    /// `prefix` selects the parameter set ("attn.txt" or "attn.img").
    pub fn modality_attention(
        &mut self,
        query: Var,
        states: &[Var],
        prefix: &str,
    ) -> Result<(Var, Var)> {
        if states.is_empty() {
            return Err(Error::Domain("attention over empty state sequence".into()));
        }
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let v = self.p(&format!("{prefix}.v"));
        let t = &mut self.tape;
        let mut energies = Vec::with_capacity(states.len());
        for &hj in states {
            let qs = t.concat_cols(&[query, hj])?;
            let e = t.matmul(qs, w1)?;
            let e = t.add(e, b1)?;
            let e = t.tanh(e);
            energies.push(t.matmul(e, v)?);
        }
        let evec = t.concat_cols(&energies)?;
        let alpha = t.softmax(evec)?;
        let hmat = t.stack_rows(states)?;
        let context = t.matmul(alpha, hmat)?;
        Ok((context, alpha))
    }

    /// Text context restricted to the read prefix: energies and
    /// softmax run over positions 1..=g only, so unread states
    /// contribute exactly zero.
    pub fn masked_text_context(
        &mut self,
        query: Var,
        h_txt: &[Var],
        g: usize,
    ) -> Result<(Var, Var)> {
        if g < 1 || g > h_txt.len() {
            return Err(Error::Contract(format!(
                "prefix length {g} outside 1..={}",
                h_txt.len()
            )));
        }
        self.modality_attention(query, &h_txt[..g], "attn.txt")
    }

    /// Second-stage attention over the two modality contexts. Returns
    /// the fused context and the 2-element weight vector
    /// [beta_img, beta_txt]. In text-only operation the text context
    /// passes through and beta is None (beta_txt defined as 1).
    pub fn hierarchical_fusion(
        &mut self,
        query: Var,
        c_txt: Var,
        c_img: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let multimodal = self.model.config.multimodal && !self.ablate_fusion;
        let Some(c_img) = c_img else {
            if multimodal {
                return Err(Error::Contract(
                    "multimodal model requires an image context".into(),
                ));
            }
            return Ok((c_txt, None));
        };
        if !multimodal {
            return Ok((c_txt, None));
        }
        let w1 = self.p("fusion.w1");
        let b1 = self.p("fusion.b1");
        let v = self.p("fusion.v");
        let w_txt = self.p("fusion.w_txt");
        let w_img = self.p("fusion.w_img");
        let t = &mut self.tape;
        let mut energies = Vec::with_capacity(2);
        for &c in &[c_img, c_txt] {
            let qc = t.concat_cols(&[query, c])?;
            let e = t.matmul(qc, w1)?;
            let e = t.add(e, b1)?;
            let e = t.tanh(e);
            energies.push(t.matmul(e, v)?);
        }
        let beta = t.concat_cols(&energies)?;
        let beta = t.softmax(beta)?;
        let pi = t.matmul(c_img, w_img)?;
        let pt = t.matmul(c_txt, w_txt)?;
        let wi = t.scale_by_elem(pi, beta, 0)?;
        let wt = t.scale_by_elem(pt, beta, 1)?;
        let fused = t.add(wi, wt)?;
        Ok((fused, Some(beta)))
    }

    pub fn zero_decoder_state(&mut self) -> DecoderState {
        let h = self.model.config.hidden_dim;
        DecoderState {
            s1: self.tape.constant(vec![1, h], vec![T::zero(); h]),
            s2: self.tape.constant(vec![1, h], vec![T::zero(); h]),
        }
    }

    /// One conditional-GRU decoder step: the first layer consumes the
    /// embedded previous token, its output queries the attentions, and
    /// the second layer consumes the fused context. Returns logits
    /// over the vocabulary.
    pub fn decoder_step(
        &mut self,
        state: &mut DecoderState,
        y_prev: usize,
        h_txt: &[Var],
        h_img: Option<&[Var]>,
        g: usize,
    ) -> Result<Var> {
        let emb_table = self.p("embedding");
        let emb = self.tape.row(emb_table, y_prev)?;
        let s1 = self.gru_step("dec.l1", emb, state.s1)?;
        let (c_txt, _alpha) = self.masked_text_context(s1, h_txt, g)?;
        let c_img = match h_img {
            Some(states) if self.model.config.multimodal && !self.ablate_fusion => {
                Some(self.modality_attention(s1, states, "attn.img")?.0)
            }
            _ => None,
        };
        let (fused, _beta) = self.hierarchical_fusion(s1, c_txt, c_img)?;
        let s2 = self.gru_step("dec.l2", fused, state.s2)?;
        state.s1 = s1;
        state.s2 = s2;

        let w = self.p("out.w");
        let b = self.p("out.b");
        let bias = self.p("out.bias");
        let o = self.tape.matmul(s2, w)?;
        let o = self.tape.add(o, b)?;
        let o = self.tape.tanh(o);
        let o = self.maybe_dropout(o, self.model.config.dropout_pre_softmax)?;
        // tied projection through the shared embedding table
        let logits = self.tape.matmul_bt(o, emb_table)?;
        self.tape.add(logits, bias)
    }
}

/// Exact learnable-parameter total implied by a config.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let (v, e, h, a, d, _m) = (
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.attn_dim,
        cfg.image_dim,
        cfg.image_seq,
    );
    let gru = |in_dim: usize| 3 * (in_dim * h) + 3 * (h * h) + 3 * h;
    let attn = 2 * h * a + a + a;
    let mut n = v * e; // embedding
    n += gru(e) + gru(h); // encoder
    n += gru(e) + gru(h); // decoder
    n += attn; // text attention
    n += h * e + e + v; // output bottleneck + bias
    if cfg.multimodal {
        n += d * h + h; // image projection
        n += attn; // image attention
        n += attn; // fusion energies
        n += 2 * h * h; // fusion projections
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Vocab, BOS};
    use crate::tensor::grad_check;

    fn tiny_vocab(extra: usize) -> Vocab {
        let toks: Vec<Vec<String>> = (0..extra)
            .map(|i| vec![format!("w{i}")])
            .collect();
        Vocab::build(toks.iter().map(|s| s.as_slice()), extra + 4).unwrap()
    }

    fn tiny_config(multimodal: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            embed_dim: 4,
            hidden_dim: 6,
            image_dim: 8,
            image_seq: 1,
            attn_dim: 5,
            multimodal,
            seed: 42,
            ..Default::default()
        }
    }

    fn tiny_model(multimodal: bool) -> Model<f64> {
        Model::new(tiny_config(multimodal), tiny_vocab(7)).unwrap()
    }

    #[test]
    fn param_count_matches_formula() {
        let m = tiny_model(true);
        assert_eq!(m.num_params(), expected_param_count(&m.config));
        let s = tiny_model(false);
        assert_eq!(s.num_params(), expected_param_count(&s.config));
        // default config value pinned
        let d = ModelConfig::default();
        assert_eq!(
            expected_param_count(&d),
            {
                let gru_e = 3 * (200 * 400) + 3 * (400 * 400) + 3 * 400;
                let gru_h = 3 * (400 * 400) + 3 * (400 * 400) + 3 * 400;
                let attn = 2 * 400 * 400 + 400 + 400;
                10_000 * 200
                    + 2 * (gru_e + gru_h)
                    + attn
                    + (400 * 200 + 200 + 10_000)
                    + (2048 * 400 + 400)
                    + 2 * attn
                    + 2 * 400 * 400
            }
        );
    }

    #[test]
    fn encoder_is_causal() {
        let m = tiny_model(false);
        let ids = vec![4, 5, 6, 7, 8, 9];
        let mut fwd = Forward::eval(&m);
        let states = fwd.encode_source(&ids).unwrap();
        let h4: Vec<Vec<f64>> = states[..4].iter().map(|&s| fwd.tape.data(s).to_vec()).collect();

        let mut perturbed = ids.clone();
        perturbed[4] = 10;
        let mut fwd2 = Forward::eval(&m);
        let states2 = fwd2.encode_source(&perturbed).unwrap();
        for (j, expect) in h4.iter().enumerate() {
            assert_eq!(fwd2.tape.data(states2[j]), expect.as_slice(), "position {j}");
        }
        assert_ne!(fwd2.tape.data(states2[4]), fwd.tape.data(states[4]));
    }

    #[test]
    fn encoder_single_token_and_empty() {
        let m = tiny_model(false);
        let mut fwd = Forward::eval(&m);
        assert_eq!(fwd.encode_source(&[4]).unwrap().len(), 1);
        assert!(fwd.encode_source(&[]).is_err());
    }

    #[test]
    fn encoder_eval_mode_deterministic() {
        let m = tiny_model(false);
        let mut a = Forward::eval(&m);
        let mut b = Forward::eval(&m);
        let sa = a.encode_source(&[4, 5, 6]).unwrap();
        let sb = b.encode_source(&[4, 5, 6]).unwrap();
        for (&x, &y) in sa.iter().zip(&sb) {
            assert_eq!(a.tape.data(x), b.tape.data(y));
        }
    }

    #[test]
    fn image_encoding_zero_feature_gives_bias() {
        let m = tiny_model(true);
        let mut fwd = Forward::eval(&m);
        let states = fwd.encode_image(&vec![0.0f32; 8]).unwrap();
        assert_eq!(states.len(), 1);
        let bias = m.param("img.proj.b").unwrap();
        assert_eq!(fwd.tape.data(states[0]), bias.data.as_slice());
    }

    #[test]
    fn image_encoding_checks_dim() {
        let m = tiny_model(true);
        let mut fwd = Forward::eval(&m);
        assert!(fwd.encode_image(&vec![0.0f32; 5]).is_err());
        let s = tiny_model(false);
        let mut fwd = Forward::eval(&s);
        assert!(fwd.encode_image(&vec![0.0f32; 8]).is_err());
    }

    #[test]
    fn attention_singleton_and_convexity() {
        let m = tiny_model(false);
        let mut fwd = Forward::eval(&m);
        let states = fwd.encode_source(&[4, 5, 6]).unwrap();
        let q = fwd.tape.constant(vec![1, 6], vec![0.1; 6]);

        let (c, a) = fwd.modality_attention(q, &states[..1], "attn.txt").unwrap();
        assert_eq!(fwd.tape.data(a), &[1.0]);
        assert_eq!(fwd.tape.data(c), fwd.tape.data(states[0]));

        // identical states: context equals the shared state
        let same = vec![states[1], states[1], states[1]];
        let (c, a) = fwd.modality_attention(q, &same, "attn.txt").unwrap();
        let alpha_sum: f64 = fwd.tape.data(a).iter().sum();
        assert!((alpha_sum - 1.0).abs() <= 1e-6);
        for (x, y) in fwd.tape.data(c).iter().zip(fwd.tape.data(states[1])) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // Independent evaluation of the additive-attention formulas on
    // the same parameters.
    #[test]
    fn attention_matches_formula_oracle() {
        let m = tiny_model(false);
        let mut fwd = Forward::eval(&m);
        let states = fwd.encode_source(&[4, 7, 9]).unwrap();
        let q = fwd.tape.constant(vec![1, 6], vec![0.3, -0.2, 0.05, 0.4, -0.1, 0.22]);
        let (c, a) = fwd.modality_attention(q, &states, "attn.txt").unwrap();

        let w1 = &m.param("attn.txt.w1").unwrap().data;
        let b1 = &m.param("attn.txt.b1").unwrap().data;
        let v = &m.param("attn.txt.v").unwrap().data;
        let qd = [0.3, -0.2, 0.05, 0.4, -0.1, 0.22];
        let mut energies = Vec::new();
        for &s in &states {
            let hd = fwd.tape.data(s);
            let cat: Vec<f64> = qd.iter().chain(hd.iter()).copied().collect();
            let mut e = 0.0;
            for k in 0..5 {
                let mut pre = b1[k];
                for (i, &x) in cat.iter().enumerate() {
                    pre += x * w1[i * 5 + k];
                }
                e += pre.tanh() * v[k];
            }
            energies.push(e);
        }
        let max = energies.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for (x, y) in fwd.tape.data(a).iter().zip(&alpha) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut ctx = vec![0.0; 6];
        for (j, &s) in states.iter().enumerate() {
            for (k, &h) in fwd.tape.data(s).iter().enumerate() {
                ctx[k] += alpha[j] * h;
            }
        }
        for (x, y) in fwd.tape.data(c).iter().zip(&ctx) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_context_prefix_semantics() {
        let m = tiny_model(false);
        let mut fwd = Forward::eval(&m);
        let states = fwd.encode_source(&[4, 5, 6, 7]).unwrap();
        let q = fwd.tape.constant(vec![1, 6], vec![0.2; 6]);

        // g = n equals the unmasked attention
        let (full, _) = fwd.modality_attention(q, &states, "attn.txt").unwrap();
        let (masked_full, _) = fwd.masked_text_context(q, &states, 4).unwrap();
        assert_eq!(fwd.tape.data(full), fwd.tape.data(masked_full));

        // g = 1 returns h_1
        let (c1, _) = fwd.masked_text_context(q, &states, 1).unwrap();
        assert_eq!(fwd.tape.data(c1), fwd.tape.data(states[0]));

        // g = 2: softmax over the first two energies only
        let (c2, a2) = fwd.masked_text_context(q, &states, 2).unwrap();
        let (cref, aref) = fwd.modality_attention(q, &states[..2], "attn.txt").unwrap();
        assert_eq!(fwd.tape.data(c2), fwd.tape.data(cref));
        assert_eq!(fwd.tape.data(a2), fwd.tape.data(aref));

        assert!(fwd.masked_text_context(q, &states, 0).is_err());
        assert!(fwd.masked_text_context(q, &states, 5).is_err());
    }

    #[test]
    fn fusion_weights_and_bypass() {
        let m = tiny_model(true);
        let mut fwd = Forward::eval(&m);
        let q = fwd.tape.constant(vec![1, 6], vec![0.1; 6]);
        let ct = fwd.tape.constant(vec![1, 6], vec![0.4; 6]);
        // identical contexts give identical energies, so beta = (1/2, 1/2)
        let ci = fwd.tape.constant(vec![1, 6], vec![0.4; 6]);
        let (_c, beta) = fwd.hierarchical_fusion(q, ct, Some(ci)).unwrap();
        let b = fwd.tape.data(beta.unwrap()).to_vec();
        assert!((b[0] - 0.5).abs() < 1e-9 && (b[1] - 0.5).abs() < 1e-9);
        assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-6);

        assert!(fwd.hierarchical_fusion(q, ct, None).is_err());

        let s = tiny_model(false);
        let mut fwd = Forward::eval(&s);
        let q = fwd.tape.constant(vec![1, 6], vec![0.1; 6]);
        let ct = fwd.tape.constant(vec![1, 6], vec![0.4; 6]);
        let (c, beta) = fwd.hierarchical_fusion(q, ct, None).unwrap();
        assert!(beta.is_none());
        assert_eq!(fwd.tape.data(c), fwd.tape.data(ct));
    }

    // Direct evaluation of the fusion formulas on the same parameters.
    #[test]
    fn fusion_matches_formula_oracle() {
        let m = tiny_model(true);
        let mut fwd = Forward::eval(&m);
        let qd = vec![0.3, -0.1, 0.2, 0.0, 0.15, -0.05];
        let ctd = vec![0.5, 0.4, -0.3, 0.2, 0.1, 0.0];
        let cid = vec![-0.2, 0.3, 0.1, 0.6, -0.4, 0.25];
        let q = fwd.tape.constant(vec![1, 6], qd.clone());
        let ct = fwd.tape.constant(vec![1, 6], ctd.clone());
        let ci = fwd.tape.constant(vec![1, 6], cid.clone());
        let (fused, beta) = fwd.hierarchical_fusion(q, ct, Some(ci)).unwrap();

        let energy = |c: &[f64]| -> f64 {
            let w1 = &m.param("fusion.w1").unwrap().data;
            let b1 = &m.param("fusion.b1").unwrap().data;
            let v = &m.param("fusion.v").unwrap().data;
            let cat: Vec<f64> = qd.iter().chain(c.iter()).copied().collect();
            (0..5)
                .map(|k| {
                    let mut pre = b1[k];
                    for (i, &x) in cat.iter().enumerate() {
                        pre += x * w1[i * 5 + k];
                    }
                    pre.tanh() * v[k]
                })
                .sum()
        };
        let (ei, et) = (energy(&cid), energy(&ctd));
        let max = ei.max(et);
        let (xi, xt) = ((ei - max).exp(), (et - max).exp());
        let bi = xi / (xi + xt);
        let bt = xt / (xi + xt);
        let bdata = fwd.tape.data(beta.unwrap());
        assert!((bdata[0] - bi).abs() < 1e-12 && (bdata[1] - bt).abs() < 1e-12);

        let proj = |c: &[f64], wname: &str| -> Vec<f64> {
            let w = &m.param(wname).unwrap().data;
            (0..6)
                .map(|j| (0..6).map(|i| c[i] * w[i * 6 + j]).sum())
                .collect()
        };
        let pi = proj(&cid, "fusion.w_img");
        let pt = proj(&ctd, "fusion.w_txt");
        for (k, x) in fwd.tape.data(fused).iter().enumerate() {
            assert!((x - (bi * pi[k] + bt * pt[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_step_smoke_and_determinism() {
        let m = tiny_model(true);
        let mut fwd = Forward::eval(&m);
        let h_txt = fwd.encode_source(&[4, 5, 6]).unwrap();
        let h_img = fwd.encode_image(&vec![0.5f32; 8]).unwrap();
        let mut st = fwd.zero_decoder_state();
        let logits = fwd
            .decoder_step(&mut st, BOS, &h_txt, Some(&h_img), 2)
            .unwrap();
        let ld = fwd.tape.data(logits).to_vec();
        assert_eq!(ld.len(), 11);
        assert!(ld.iter().all(|x| x.is_finite()));

        let mut fwd2 = Forward::eval(&m);
        let h_txt2 = fwd2.encode_source(&[4, 5, 6]).unwrap();
        let h_img2 = fwd2.encode_image(&vec![0.5f32; 8]).unwrap();
        let mut st2 = fwd2.zero_decoder_state();
        let logits2 = fwd2
            .decoder_step(&mut st2, BOS, &h_txt2, Some(&h_img2), 2)
            .unwrap();
        assert_eq!(ld, fwd2.tape.data(logits2));
    }

    #[test]
    fn decoder_step_rejects_bad_token() {
        let m = tiny_model(false);
        let mut fwd = Forward::eval(&m);
        let h_txt = fwd.encode_source(&[4]).unwrap();
        let mut st = fwd.zero_decoder_state();
        assert!(fwd.decoder_step(&mut st, 99, &h_txt, None, 1).is_err());
    }

    // Finite-difference check through a full decoder step (the
    // heaviest composite graph in the model).
    #[test]
    fn decoder_step_gradient_matches_finite_differences() {
        let m = tiny_model(true);
        let params: Vec<Tensor<f64>> = m.params().to_vec();
        let err = grad_check(
            |tape, vars| {
                let mut fwd = Forward::eval(&m);
                // rebuild on the provided tape by copying leaf bindings
                std::mem::swap(&mut fwd.tape, tape);
                fwd.vars = vars.to_vec();
                let h_txt = fwd.encode_source(&[4, 5, 6])?;
                let h_img = fwd.encode_image(&[0.3; 8])?;
                let mut st = fwd.zero_decoder_state();
                let l1 = fwd.decoder_step(&mut st, BOS, &h_txt, Some(&h_img), 2)?;
                let l2 = fwd.decoder_step(&mut st, 5, &h_txt, Some(&h_img), 3)?;
                let rows = fwd.tape.stack_rows(&[l1, l2])?;
                let loss = fwd.tape.cross_entropy(rows, &[5, 6])?;
                std::mem::swap(&mut fwd.tape, tape);
                Ok(loss)
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-4, "decoder grad check err {err}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny_model(true);
        m.save(&path).unwrap();
        let loaded = Model::<f64>::load(&path).unwrap();
        assert_eq!(loaded.config, m.config);
        assert_eq!(loaded.vocab.tokens(), m.vocab.tokens());
        for name in m.param_names() {
            let a = m.param(name).unwrap();
            let b = loaded.param(name).unwrap();
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                // f32 payload round-trip
                assert!((x - y).abs() < 1e-6, "{name}");
            }
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(Model::<f64>::load(&path).is_err());
    }

    #[test]
    fn shared_text_path_gives_identical_loss_when_fusion_ablated() {
        let snmt = tiny_model(false);
        let mut msnmt = tiny_model(true);
        msnmt.copy_matching_params(&snmt);

        let loss = |m: &Model<f64>, ablate: bool| -> f64 {
            let mut fwd = Forward::eval(m);
            fwd.ablate_fusion = ablate;
            let h_txt = fwd.encode_source(&[4, 5, 6]).unwrap();
            let mut st = fwd.zero_decoder_state();
            let l1 = fwd.decoder_step(&mut st, BOS, &h_txt, None, 1).unwrap();
            let l2 = fwd.decoder_step(&mut st, 5, &h_txt, None, 2).unwrap();
            let rows = fwd.tape.stack_rows(&[l1, l2]).unwrap();
            let l = fwd.tape.cross_entropy(rows, &[5, 6]).unwrap();
            fwd.tape.data(l)[0]
        };
        assert_eq!(loss(&snmt, false), loss(&msnmt, true));
    }
}
