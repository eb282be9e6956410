//! Greedy simultaneous decoding under a policy, with the read/write
//! schedule recorded for latency evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{FeatureStore, SentencePair, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::policy::Policy;
use crate::tensor::Real;

/// Per-token record of the prefix length used at emission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeTrace {
    /// g(t) at each emitted content token (EOS excluded).
    pub g_values: Vec<usize>,
    pub source_len: usize,
}

impl DecodeTrace {
    pub fn target_len(&self) -> usize {
        self.g_values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted token ids, no BOS/EOS.
    pub tokens: Vec<usize>,
    pub trace: DecodeTrace,
}

/// Where decoding gets its image context from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Look features up by each sentence's image id.
    Store(&'a FeatureStore),
    /// All-zero feature vectors (the pretraining regime).
    Zeros,
    /// Text-only model: no image branch at all.
    None,
}

/// Decode length cap: headroom for target-to-source length ratios
/// well above 1 without runaway loops.
pub fn max_decode_len(source_len: usize) -> usize {
    (3 * source_len + 5).min(200)
}

/// Greedy prefix-to-prefix decoding of one sentence. At each step t
/// the distribution conditions only on the source prefix of length
/// g(t), the image (if any), and previously emitted tokens.
pub fn translate<T: Real>(
    model: &Model<T>,
    source_ids: &[usize],
    feature: Option<&[f32]>,
    policy: Policy,
    max_len: usize,
) -> Result<Hypothesis> {
    if source_ids.is_empty() {
        return Err(Error::Domain("cannot translate empty source".into()));
    }
    if model.config.multimodal != feature.is_some() {
        return Err(Error::Contract(if model.config.multimodal {
            "multimodal model requires an image feature (or zeros mode)".into()
        } else {
            "text-only model cannot take an image feature".into()
        }));
    }
    let n = source_ids.len();
    let mut fwd = Forward::eval(model);
    let h_txt = fwd.encode_source(source_ids)?;
    let h_img = match feature {
        Some(f) => Some(fwd.encode_image(f)?),
        None => None,
    };
    let mut state = fwd.zero_decoder_state();
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut g_values = Vec::new();
    for t in 1..=max_len {
        let g = policy.g(t, n)?;
        let logits = fwd.decoder_step(&mut state, prev, &h_txt, h_img.as_deref(), g)?;
        let data = fwd.tape.data(logits);
        let mut best = EOS;
        let mut best_score = T::neg_infinity();
        for (id, &score) in data.iter().enumerate() {
            if id == PAD || id == BOS {
                continue;
            }
            if score > best_score {
                best_score = score;
                best = id;
            }
        }
        if best == EOS {
            break;
        }
        tokens.push(best);
        g_values.push(g);
        prev = best;
    }
    Ok(Hypothesis {
        tokens,
        trace: DecodeTrace {
            g_values,
            source_len: n,
        },
    })
}

/// Order-preserving corpus decode. Feature lookup follows
/// `FeatureSource`; pairs must carry image ids when a store is used.
pub fn translate_corpus<T: Real>(
    model: &Model<T>,
    pairs: &[SentencePair],
    policy: Policy,
    features: FeatureSource<'_>,
) -> Result<Vec<Hypothesis>> {
    let cfg = &model.config;
    let zero = vec![0.0f32; cfg.image_seq * cfg.image_dim];
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let source_ids = model.vocab.encode(&pair.source);
        let feat: Option<&[f32]> = match features {
            FeatureSource::None => None,
            FeatureSource::Zeros => Some(&zero),
            FeatureSource::Store(store) => {
                let id = pair.image_id.as_deref().ok_or_else(|| {
                    Error::Lookup(format!("sentence {} has no image id", pair.id))
                })?;
                Some(store.get(id).ok_or_else(|| {
                    Error::Lookup(format!("no feature for image {id}"))
                })?)
            }
        };
        let max = max_decode_len(source_ids.len());
        out.push(translate(model, &source_ids, feat, policy, max)?);
    }
    Ok(out)
}

/// One space-joined hypothesis per line.
pub fn write_hypotheses<T: Real>(
    path: &Path,
    model: &Model<T>,
    hyps: &[Hypothesis],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in hyps {
        writeln!(w, "{}", model.vocab.decode(&h.tokens).join(" "))?;
    }
    Ok(())
}

/// Sidecar trace file: comma-separated g(t) values, then "|", then n.
pub fn write_traces(path: &Path, hyps: &[Hypothesis]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in hyps {
        let gs: Vec<String> = h.trace.g_values.iter().map(|g| g.to_string()).collect();
        writeln!(w, "{}|{}", gs.join(","), h.trace.source_len)?;
    }
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<DecodeTrace>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (gs, n) = line
            .rsplit_once('|')
            .ok_or_else(|| Error::Format(format!("trace line {}: missing '|'", i + 1)))?;
        let source_len: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("trace line {}: bad source length", i + 1)))?;
        let g_values = if gs.trim().is_empty() {
            Vec::new()
        } else {
            gs.split(',')
                .map(|g| {
                    g.trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("trace line {}: bad g value", i + 1)))
                })
                .collect::<Result<Vec<usize>>>()?
        };
        out.push(DecodeTrace {
            g_values,
            source_len,
        });
    }
    Ok(out)
}
