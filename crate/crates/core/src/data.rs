//! Corpus ingestion, vocabularies, image-feature and entity-annotation
//! file formats, batching, and the synthetic multimodal dataset
//! generator used by the acceptance tests.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Longest accepted source/target sentence. Longer sentences are
/// rejected at load; silent truncation would corrupt latency scores
/// and entity indices.
pub const MAX_LEN: usize = 100;

const FEATURE_MAGIC: &[u8; 4] = b"MMFT";
const FEATURE_VERSION: u32 = 1;

/// Joint source+target vocabulary with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Keeps the most frequent tokens up to `cap` total entries
    /// (including the 4 reserved ids); ties break by first occurrence.
    pub fn build<'a, I>(corpus: I, cap: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if cap < 5 {
            return Err(Error::Domain(format!("vocab cap {cap} < 5")));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // (freq, first_seen)
        let mut order = 0usize;
        let mut any = false;
        for sent in corpus {
            any = true;
            for tok in sent {
                let e = counts.entry(tok).or_insert((0, order));
                e.0 += 1;
                order += 1;
            }
        }
        if !any {
            return Err(Error::Domain("empty corpus".into()));
        }
        let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (tok, _) in ranked.into_iter().take(cap - RESERVED.len()) {
            id_to_token.push(tok.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.id_to_token[i].clone()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuilds a vocab from its id-ordered token list (checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::Format("vocab shorter than reserved ids".into()));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token: tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub id: usize,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub image_id: Option<String>,
}

/// One sentence pair per line in each file, whitespace-tokenized.
pub fn load_parallel_corpus(src: &Path, tgt: &Path) -> Result<Vec<SentencePair>> {
    let src_lines = read_lines(src)?;
    let tgt_lines = read_lines(tgt)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Format(format!(
            "line-count mismatch: {} has {} lines, {} has {}",
            src.display(),
            src_lines.len(),
            tgt.display(),
            tgt_lines.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(tgt_lines.iter()).enumerate() {
        let source = tokenize_line(s, i, src)?;
        let target = tokenize_line(t, i, tgt)?;
        pairs.push(SentencePair {
            id: i,
            source,
            target,
            image_id: None,
        });
    }
    Ok(pairs)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line?);
    }
    Ok(lines)
}

fn tokenize_line(line: &str, idx: usize, path: &Path) -> Result<Vec<String>> {
    let toks: Vec<String> = line.split_whitespace().map(|s| s.to_string()).collect();
    if toks.is_empty() {
        return Err(Error::Format(format!(
            "empty line {} in {}",
            idx + 1,
            path.display()
        )));
    }
    if toks.len() > MAX_LEN {
        return Err(Error::Format(format!(
            "line {} in {} has {} tokens, max {}",
            idx + 1,
            path.display(),
            toks.len(),
            MAX_LEN
        )));
    }
    Ok(toks)
}

/// Sentence-index-aligned image-id file: one id per line.
pub fn load_image_id_map(path: &Path, pairs: &mut [SentencePair]) -> Result<()> {
    let lines = read_lines(path)?;
    if lines.len() != pairs.len() {
        return Err(Error::Format(format!(
            "image-id map has {} lines for {} sentences",
            lines.len(),
            pairs.len()
        )));
    }
    for (pair, id) in pairs.iter_mut().zip(lines) {
        pair.image_id = Some(id.trim().to_string());
    }
    Ok(())
}

/// Per-image dense visual features, m vectors of dimension `dim` each.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub m: usize,
    pub dim: usize,
    order: Vec<String>,
    by_id: HashMap<String, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(m: usize, dim: usize) -> Self {
        FeatureStore {
            m,
            dim,
            order: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: String, feature: Vec<f32>) -> Result<()> {
        if feature.len() != self.m * self.dim {
            return Err(Error::Shape(format!(
                "feature for {id} has {} values, expected {}",
                feature.len(),
                self.m * self.dim
            )));
        }
        if !self.by_id.contains_key(&id) {
            self.order.push(id.clone());
        }
        self.by_id.insert(id, feature);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(FEATURE_MAGIC)?;
        w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
        w.write_u32::<LittleEndian>(self.order.len() as u32)?;
        w.write_u32::<LittleEndian>(self.m as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for id in &self.order {
            let bytes = id.as_bytes();
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            for &x in &self.by_id[id] {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureStore> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("feature file too short for magic".into()))?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format(format!(
                "bad feature magic {:?}, expected {:?}",
                magic, FEATURE_MAGIC
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!(
                "unsupported feature format version {version}"
            )));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let mut store = FeatureStore::new(m, dim);
        for i in 0..count {
            let id_len = r
                .read_u16::<LittleEndian>()
                .map_err(|_| Error::Format(format!("truncated: {i} of {count} records")))?
                as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes)
                .map_err(|_| Error::Format(format!("truncated id in record {i}")))?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| Error::Format(format!("non-UTF-8 image id in record {i}")))?;
            let mut feat = Vec::with_capacity(m * dim);
            for _ in 0..m * dim {
                feat.push(r.read_f32::<LittleEndian>().map_err(|_| {
                    Error::Format(format!("truncated payload in record {i} ({id})"))
                })?);
            }
            if feat.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("non-finite feature in record {i}")));
            }
            store.insert(id, feat)?;
        }
        Ok(store)
    }
}

/// One annotated entity: aligned source/target spans, 1-based inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: u32,
    pub tag: String,
    pub src_span: (usize, usize),
    pub tgt_span: (usize, usize),
    /// Set when the same entity id occurs more than once in the
    /// sentence; such entities cannot be aligned and are skipped by
    /// the entity analysis.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityAnnotation {
    pub sentence_id: usize,
    pub entities: Vec<Entity>,
}

/// Line format: `sentence_id TAB id:tag:ss-se:ts-te ...`; a line with
/// no entities is just the sentence id.
pub fn load_entity_annotations(path: &Path, pairs: &[SentencePair]) -> Result<Vec<EntityAnnotation>> {
    let lines = read_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (lineno, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (sid_str, rest) = match line.split_once('\t') {
            Some((a, b)) => (a, b),
            None => (line.as_str(), ""),
        };
        let sentence_id: usize = sid_str.trim().parse().map_err(|_| {
            Error::Format(format!("line {}: bad sentence id {sid_str:?}", lineno + 1))
        })?;
        let pair = pairs.iter().find(|p| p.id == sentence_id).ok_or_else(|| {
            Error::Format(format!("line {}: unknown sentence id {sentence_id}", lineno + 1))
        })?;
        let mut entities = Vec::new();
        for item in rest.split_whitespace() {
            let fields: Vec<&str> = item.split(':').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!(
                    "line {}: entity record {item:?} must be id:tag:ss-se:ts-te",
                    lineno + 1
                )));
            }
            let id: u32 = fields[0].parse().map_err(|_| {
                Error::Format(format!("line {}: bad entity id {:?}", lineno + 1, fields[0]))
            })?;
            let src_span = parse_span(fields[2], lineno)?;
            let tgt_span = parse_span(fields[3], lineno)?;
            check_span(src_span, pair.source.len(), sentence_id, "source")?;
            check_span(tgt_span, pair.target.len(), sentence_id, "target")?;
            entities.push(Entity {
                id,
                tag: fields[1].to_string(),
                src_span,
                tgt_span,
                excluded: false,
            });
        }
        // ids occurring more than once cannot be aligned
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for e in &entities {
            *counts.entry(e.id).or_insert(0) += 1;
        }
        for e in entities.iter_mut() {
            e.excluded = counts[&e.id] > 1;
        }
        out.push(EntityAnnotation {
            sentence_id,
            entities,
        });
    }
    Ok(out)
}

fn parse_span(s: &str, lineno: usize) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| Error::Format(format!("line {}: bad span {s:?}", lineno + 1)))?;
    let start: usize = a
        .parse()
        .map_err(|_| Error::Format(format!("line {}: bad span {s:?}", lineno + 1)))?;
    let end: usize = b
        .parse()
        .map_err(|_| Error::Format(format!("line {}: bad span {s:?}", lineno + 1)))?;
    if start < 1 || end < start {
        return Err(Error::Format(format!("line {}: bad span {s:?}", lineno + 1)));
    }
    Ok((start, end))
}

fn check_span(span: (usize, usize), len: usize, sid: usize, side: &str) -> Result<()> {
    if span.1 > len {
        return Err(Error::Format(format!(
            "sentence {sid}: {side} span {}-{} out of bounds (length {len})",
            span.0, span.1
        )));
    }
    Ok(())
}

pub fn save_entity_annotations(path: &Path, annotations: &[EntityAnnotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ann in annotations {
        write!(w, "{}", ann.sentence_id)?;
        for (i, e) in ann.entities.iter().enumerate() {
            let sep = if i == 0 { '\t' } else { ' ' };
            write!(
                w,
                "{sep}{}:{}:{}-{}:{}-{}",
                e.id, e.tag, e.src_span.0, e.src_span.1, e.tgt_span.0, e.tgt_span.1
            )?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Padded, id-encoded minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [batch][max_src_len] id matrix, PAD after true length.
    pub src_ids: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_ids: Vec<Vec<usize>>,
    pub tgt_lens: Vec<usize>,
    /// Per-sentence m×dim feature block; all zeros in zero-feature mode.
    pub features: Vec<Vec<f32>>,
    pub sentence_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sentence_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence_ids.is_empty()
    }
}

/// Deterministic seeded shuffle, padding to per-batch max length, the
/// final partial batch kept. `features: None` is zero-feature mode.
pub fn make_batches(
    pairs: &[SentencePair],
    vocab: &Vocab,
    features: Option<&FeatureStore>,
    m: usize,
    dim: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let max_src = chunk.iter().map(|&i| pairs[i].source.len()).max().unwrap();
        let max_tgt = chunk.iter().map(|&i| pairs[i].target.len()).max().unwrap();
        let mut batch = Batch {
            src_ids: Vec::new(),
            src_lens: Vec::new(),
            tgt_ids: Vec::new(),
            tgt_lens: Vec::new(),
            features: Vec::new(),
            sentence_ids: Vec::new(),
        };
        for &i in chunk {
            let p = &pairs[i];
            let mut s = vocab.encode(&p.source);
            let mut t = vocab.encode(&p.target);
            batch.src_lens.push(s.len());
            batch.tgt_lens.push(t.len());
            s.resize(max_src, PAD);
            t.resize(max_tgt, PAD);
            batch.src_ids.push(s);
            batch.tgt_ids.push(t);
            let feat = match features {
                None => vec![0.0f32; m * dim],
                Some(store) => {
                    let id = p.image_id.as_deref().ok_or_else(|| {
                        Error::Lookup(format!("sentence {} has no image id", p.id))
                    })?;
                    store
                        .get(id)
                        .ok_or_else(|| Error::Lookup(format!("no feature for image {id}")))?
                        .to_vec()
                }
            };
            batch.features.push(feat);
            batch.sentence_ids.push(p.id);
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Parameters of the synthetic SVO→SOV dataset.
///
/// Source sentences read `SUBJ VERB fillers... OBJ .` and targets read
/// `OBJ' fillers'... SUBJ' VERB' .`, so at small k the object must be
/// emitted before it has been read. Filler tokens are a deterministic
/// function of the verb, which has been read by the time they are
/// emitted; only the object is unpredictable from the text prefix.
/// The image feature one-hot encodes the object class.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub sentences: usize,
    pub object_classes: usize,
    pub subjects: usize,
    pub verbs: usize,
    /// Source length range, inclusive; must allow length >= 3.
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sentences: 500,
            object_classes: 10,
            subjects: 8,
            verbs: 6,
            min_len: 4,
            max_len: 6,
            feature_dim: 16,
            noise: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub pairs: Vec<SentencePair>,
    pub features: FeatureStore,
    pub annotations: Vec<EntityAnnotation>,
}

pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.min_len < 3 || spec.max_len < spec.min_len {
        return Err(Error::Domain(format!(
            "inconsistent length range {}..={}, need min >= 3",
            spec.min_len, spec.max_len
        )));
    }
    if spec.feature_dim < spec.object_classes {
        return Err(Error::Domain(format!(
            "feature dim {} < object classes {}",
            spec.feature_dim, spec.object_classes
        )));
    }
    if spec.sentences == 0 || spec.object_classes == 0 || spec.subjects == 0 || spec.verbs == 0 {
        return Err(Error::Domain("synthetic spec counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(spec.sentences);
    let mut features = FeatureStore::new(1, spec.feature_dim);
    let mut annotations = Vec::with_capacity(spec.sentences);

    for idx in 0..spec.sentences {
        let subj = rng.gen_range(0..spec.subjects);
        let verb = rng.gen_range(0..spec.verbs);
        let obj = rng.gen_range(0..spec.object_classes);
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let with_punct = len >= 4;
        let fillers = if with_punct { len - 4 } else { 0 };

        let mut source = vec![format!("s{subj}"), format!("v{verb}")];
        let mut target = vec![format!("O{obj}")];
        for j in 0..fillers {
            let f = (verb * 31 + j * 7) % 17;
            source.push(format!("f{f}"));
            target.push(format!("F{f}"));
        }
        let obj_pos = source.len() + 1; // 1-based
        source.push(format!("o{obj}"));
        target.push(format!("S{subj}"));
        target.push(format!("V{verb}"));
        let subj_tgt_pos = 1 + fillers + 1; // 1-based position of S token
        if with_punct {
            source.push(".".into());
            target.push(".".into());
        }

        let image_id = format!("img{idx:05}");
        let mut feat = vec![0.0f32; spec.feature_dim];
        feat[obj] = 1.0;
        for x in feat.iter_mut() {
            *x += (rng.gen::<f64>() * 2.0 - 1.0) as f32 * spec.noise as f32;
        }
        features.insert(image_id.clone(), feat)?;

        annotations.push(EntityAnnotation {
            sentence_id: idx,
            entities: vec![
                Entity {
                    id: 1,
                    tag: "SUBJ".into(),
                    src_span: (1, 1),
                    tgt_span: (subj_tgt_pos, subj_tgt_pos),
                    excluded: false,
                },
                Entity {
                    id: 2,
                    tag: "OBJ".into(),
                    src_span: (obj_pos, obj_pos),
                    tgt_span: (1, 1),
                    excluded: false,
                },
            ],
        });
        pairs.push(SentencePair {
            id: idx,
            source,
            target,
            image_id: Some(image_id),
        });
    }
    Ok(SyntheticDataset {
        pairs,
        features,
        annotations,
    })
}

/// Writes a dataset in the on-disk formats the loaders expect:
/// `src.txt`, `tgt.txt`, `image_ids.txt`, `features.bin`,
/// `entities.txt` under `dir`.
pub fn write_dataset(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut src = BufWriter::new(File::create(dir.join("src.txt"))?);
    let mut tgt = BufWriter::new(File::create(dir.join("tgt.txt"))?);
    let mut ids = BufWriter::new(File::create(dir.join("image_ids.txt"))?);
    for p in &data.pairs {
        writeln!(src, "{}", p.source.join(" "))?;
        writeln!(tgt, "{}", p.target.join(" "))?;
        writeln!(ids, "{}", p.image_id.as_deref().unwrap_or(""))?;
    }
    drop((src, tgt, ids));
    data.features.save(&dir.join("features.bin"))?;
    save_entity_annotations(&dir.join("entities.txt"), &data.annotations)?;
    Ok(())
}
