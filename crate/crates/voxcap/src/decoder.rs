//! Toy autoregressive decoder standing in for the frozen LLM: closed
//! word-level vocabulary, prompt assembly over media tokens plus instruction
//! text, causal forward for teacher-forced CE, greedy generation, and the
//! surrogate-caption oracle.

use std::collections::{BTreeMap, HashMap};

use crate::blocks::{Block, LinearHead, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::{SeedRng, Tensor};
use crate::params::{Binder, ParamId, ParamStore};
use crate::text::normalize;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MEDIA: usize = 3;
pub const SEP: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<media>", "<sep>"];

/// Closed word-level vocabulary with dense ids; specials occupy [0, 5).
#[derive(Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from a text corpus; every normalized token becomes an entry.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
        let mut words: Vec<String> = corpus
            .into_iter()
            .flat_map(|t| normalize(t))
            .collect();
        words.sort();
        words.dedup();
        if words.is_empty() {
            return Err(Error::validation("empty vocabulary corpus"));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for one already-normalized token, if present.
    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::validation(format!("token id {id} outside vocabulary")))
    }

    /// Normalizes and maps to ids; unknown tokens are all named in the error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let toks = normalize(text);
        let unknown: Vec<&String> = toks.iter().filter(|t| !self.index.contains_key(*t)).collect();
        if !unknown.is_empty() {
            let mut names: Vec<String> = unknown.iter().map(|t| format!("{t:?}")).collect();
            names.dedup();
            return Err(Error::validation(format!(
                "unknown tokens under closed vocab: {}",
                names.join(", ")
            )));
        }
        Ok(toks.iter().map(|t| self.index[t]).collect())
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            out.push(self.token(id)?);
        }
        Ok(out.join(" "))
    }
}

/// A prompt laid out as [media][bos][instruction][sep][answer][eos], with the
/// loss mask true only over answer and eos.
#[derive(Clone, Debug)]
pub struct Assembly {
    pub n_media: usize,
    pub text_ids: Vec<usize>,
    /// Logits rows that bear loss (each predicts the next position's token).
    pub loss_positions: Vec<usize>,
    /// Target ids aligned with loss_positions.
    pub targets: Vec<usize>,
}

impl Assembly {
    pub fn seq_len(&self) -> usize {
        self.n_media + self.text_ids.len()
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        // Mask over targets: position p is loss-bearing when some logits row
        // p-1 predicts it.
        let mut mask = vec![false; self.seq_len()];
        for &row in &self.loss_positions {
            mask[row + 1] = true;
        }
        mask
    }
}

pub fn assemble_prompt(
    vocab: &Vocab,
    n_media: usize,
    instruction: &str,
    answer: Option<&str>,
) -> Result<Assembly> {
    if n_media == 0 {
        return Err(Error::validation("prompt needs at least one media token"));
    }
    let instr_ids = vocab.encode(instruction)?;
    if instr_ids.is_empty() {
        return Err(Error::validation("empty instruction"));
    }
    let mut text_ids = vec![BOS];
    text_ids.extend(&instr_ids);
    text_ids.push(SEP);
    let mut loss_positions = Vec::new();
    let mut targets = Vec::new();
    if let Some(ans) = answer {
        let ans_ids = vocab.encode(ans)?;
        if ans_ids.is_empty() {
            return Err(Error::validation("empty answer text"));
        }
        for id in ans_ids.iter().chain(std::iter::once(&EOS)) {
            // The row before each answer token predicts it.
            loss_positions.push(n_media + text_ids.len() - 1);
            targets.push(*id);
            text_ids.push(*id);
        }
        text_ids.pop();
        text_ids.push(EOS);
    }
    Ok(Assembly {
        n_media,
        text_ids,
        loss_positions,
        targets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub max_len: usize,
}

/// Causal transformer over [media tokens][text embeddings].
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub vocab: Vocab,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_g: ParamId,
    ln_b: ParamId,
    head: LinearHead,
}

impl Decoder {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        cfg: DecoderConfig,
        vocab: Vocab,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if cfg.max_len == 0 {
            return Err(Error::validation("decoder max_len must be >= 1"));
        }
        let d = cfg.width;
        let v = vocab.len();
        let embed = store.init_normal(group, "dec.embed", &[v, d], 0.02, rng)?;
        let pos = store.init_normal(group, "dec.pos", &[cfg.max_len, d], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(Block::init(
                store,
                group,
                &format!("dec.{i}"),
                d,
                cfg.heads,
                cfg.mlp_ratio,
                rng,
            )?);
        }
        let ln_g = store.init_full(group, "dec.final.ln_g", &[d], 1.0)?;
        let ln_b = store.init_zeros(group, "dec.final.ln_b", &[d])?;
        let head = LinearHead::init(store, group, "dec.head", d, v, rng)?;
        Ok(Decoder {
            cfg,
            vocab,
            embed,
            pos,
            blocks,
            ln_g,
            ln_b,
            head,
        })
    }

    /// The input embedding table id (the evaluation proxy embedder reads it).
    pub fn embed_param(&self) -> ParamId {
        self.embed
    }

    /// Teacher-forced logits [T, V] for one assembled prompt.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        media: NodeId,
        asm: &Assembly,
    ) -> Result<NodeId> {
        let mshape = g.value(media).shape();
        if mshape.len() != 2 || mshape[1] != self.cfg.width {
            return Err(Error::shape(
                format!("[M, {}] media tokens", self.cfg.width),
                format!("{mshape:?}"),
            ));
        }
        if mshape[0] != asm.n_media {
            return Err(Error::shape(
                format!("{} media rows", asm.n_media),
                format!("{}", mshape[0]),
            ));
        }
        let t = asm.seq_len();
        if t > self.cfg.max_len {
            return Err(Error::validation(format!(
                "sequence length {t} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let table = binder.node(g, self.embed);
        let text = g.gather_rows(table, &asm.text_ids)?;
        let mut x = g.concat_rows(&[media, text])?;
        let pos_all = binder.node(g, self.pos);
        let pos = g.slice_rows(pos_all, 0, t)?;
        x = g.add(x, pos)?;
        for blk in &self.blocks {
            x = blk.forward(g, binder, x, true, None)?;
        }
        let lg = binder.node(g, self.ln_g);
        let lb = binder.node(g, self.ln_b);
        let x = g.layer_norm(x, lg, lb, LN_EPS)?;
        self.head.forward(g, binder, x)
    }

    /// Greedy decoding; ties break toward the lowest token id. Returns the
    /// generated text and whether it was truncated at max_new tokens.
    pub fn generate(
        &self,
        store: &ParamStore,
        media: &Tensor,
        instruction: &str,
        max_new: usize,
    ) -> Result<(String, bool)> {
        let base = assemble_prompt(&self.vocab, media.dim(0), instruction, None)?;
        let mut generated: Vec<usize> = Vec::new();
        let groups = std::collections::BTreeSet::new();
        loop {
            if generated.len() >= max_new {
                return Ok((self.vocab.decode(&generated)?, true));
            }
            let mut asm = base.clone();
            asm.text_ids.extend(&generated);
            let mut g = Graph::new();
            let mut binder = Binder::new(store, &groups);
            let m = g.constant(media.clone());
            let logits = self.forward_logits(&mut g, &mut binder, m, &asm)?;
            let values = g.value(logits);
            let vdim = values.dim(1);
            let last = &values.data()[(values.dim(0) - 1) * vdim..];
            let next = greedy_pick(last);
            if next == EOS {
                return Ok((self.vocab.decode(&generated)?, false));
            }
            generated.push(next);
        }
    }
}

/// Index of the maximum value; the first (lowest) index wins ties.
pub fn greedy_pick(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Provider interface for the faithful external-captioner path.
pub trait CaptionProvider {
    fn caption(&self, class_label: &str, instruction: &str) -> Result<String>;
}

/// Surrogate-caption source: deterministic class templates, or an external
/// provider behind the trait.
pub enum CaptionOracle {
    Template { table: BTreeMap<u32, String> },
    External(Box<dyn CaptionProvider>),
}

impl CaptionOracle {
    pub fn template(table: BTreeMap<u32, String>) -> Self {
        CaptionOracle::Template { table }
    }

    pub fn surrogate(&self, class_id: u32, class_label: &str, instruction: &str) -> Result<String> {
        match self {
            CaptionOracle::Template { table } => table
                .get(&class_id)
                .cloned()
                .ok_or_else(|| Error::validation(format!("no template for class {class_id}"))),
            CaptionOracle::External(p) => p.caption(class_label, instruction),
        }
    }
}
