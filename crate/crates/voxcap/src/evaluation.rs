//! Caption evaluation: corpus BLEU with documented smoothing, ROUGE-L,
//! an embedding-similarity proxy score, and per-subject report tables.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::normalize;

/// One generated caption with its reference, tokenized for scoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub subject_id: u32,
    pub sample_id: u32,
    pub instruction: String,
    pub reference: String,
    pub hypothesis: String,
    pub truncated: bool,
    pub ref_tokens: Vec<String>,
    pub hyp_tokens: Vec<String>,
}

impl DecodeRecord {
    pub fn new(
        subject_id: u32,
        sample_id: u32,
        instruction: &str,
        reference: &str,
        hypothesis: &str,
        truncated: bool,
    ) -> Result<Self> {
        let ref_tokens = normalize(reference);
        if ref_tokens.is_empty() {
            return Err(Error::validation(format!(
                "empty reference for sample {sample_id}"
            )));
        }
        Ok(DecodeRecord {
            subject_id,
            sample_id,
            instruction: instruction.to_string(),
            reference: reference.to_string(),
            hypothesis: hypothesis.to_string(),
            truncated,
            ref_tokens,
            hyp_tokens: normalize(hypothesis),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    /// N-gram orders whose zero match count was add-one smoothed.
    pub smoothed_orders: Vec<usize>,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU over orders 1..=n with brevity penalty. Orders with zero
/// matched n-grams use add-one smoothing on both counts.
pub fn bleu_n(records: &[DecodeRecord], n: usize) -> Result<BleuScore> {
    if records.is_empty() {
        return Err(Error::validation("empty record set for BLEU"));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::validation(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for rec in records {
        hyp_len += rec.hyp_tokens.len();
        ref_len += rec.ref_tokens.len();
        for k in 1..=n {
            let hyp = ngram_counts(&rec.hyp_tokens, k);
            let rf = ngram_counts(&rec.ref_tokens, k);
            for (gram, &count) in &hyp {
                matches[k - 1] += count.min(rf.get(gram).copied().unwrap_or(0));
            }
            totals[k - 1] += rec.hyp_tokens.len().saturating_sub(k - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(BleuScore {
            score: 0.0,
            smoothed_orders: vec![],
        });
    }
    let mut smoothed_orders = Vec::new();
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut m, mut t) = (matches[k - 1] as f64, totals[k - 1] as f64);
        if matches[k - 1] == 0 {
            smoothed_orders.push(k);
            m += 1.0;
            t += 1.0;
        }
        log_sum += (m / t).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(BleuScore {
        score: 100.0 * bp * (log_sum / n as f64).exp(),
        smoothed_orders,
    })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        for j in 1..=n {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur[0] = 0;
    }
    prev[n]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RougeScores {
    pub f: f64,
    pub p: f64,
    pub r: f64,
    /// Records skipped for lacking reference tokens.
    pub excluded: usize,
}

/// Macro-averaged ROUGE-L (β = 1) in percent.
pub fn rouge_l(records: &[DecodeRecord]) -> Result<RougeScores> {
    if records.is_empty() {
        return Err(Error::validation("empty record set for ROUGE-L"));
    }
    let (mut sf, mut sp, mut sr) = (0.0, 0.0, 0.0);
    let mut used = 0usize;
    let mut excluded = 0usize;
    for rec in records {
        if rec.ref_tokens.is_empty() {
            excluded += 1;
            continue;
        }
        used += 1;
        if rec.hyp_tokens.is_empty() {
            continue;
        }
        let l = lcs_len(&rec.hyp_tokens, &rec.ref_tokens) as f64;
        let p = l / rec.hyp_tokens.len() as f64;
        let r = l / rec.ref_tokens.len() as f64;
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f;
    }
    if used == 0 {
        return Err(Error::validation("no scorable records for ROUGE-L"));
    }
    let d = used as f64;
    Ok(RougeScores {
        f: 100.0 * sf / d,
        p: 100.0 * sp / d,
        r: 100.0 * sr / d,
        excluded,
    })
}

/// Token-to-vector source for the proxy embedding score.
pub trait TokenEmbedder {
    fn width(&self) -> usize;
    /// None marks an out-of-vocabulary token.
    fn vector(&self, token: &str) -> Option<Vec<f64>>;
}

/// Default embedder: rows of the toy decoder's input embedding table.
pub struct DecoderEmbedder<'a> {
    pub vocab: &'a Vocab,
    pub table: &'a Tensor,
}

impl TokenEmbedder for DecoderEmbedder<'_> {
    fn width(&self) -> usize {
        self.table.dim(1)
    }

    fn vector(&self, token: &str) -> Option<Vec<f64>> {
        let id = self.vocab.id_of(token)?;
        let d = self.table.dim(1);
        Some(self.table.data()[id * d..(id + 1) * d].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedScore {
    pub score: f64,
    pub unknown_tokens: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Greedy token-matching similarity (the "bertscore_proxy" column): for each
/// hypothesis token the best cosine against any reference token (precision
/// direction), symmetrically for recall, F-combined and averaged over records.
pub fn embedding_score(records: &[DecodeRecord], embedder: &dyn TokenEmbedder) -> Result<EmbedScore> {
    if records.is_empty() {
        return Err(Error::validation("empty record set for embedding score"));
    }
    let d = embedder.width();
    let mut unk = vec![0.0; d];
    unk[0] = 1.0;
    let mut unknown_tokens = 0usize;
    let mut lookup = |tok: &str| -> Vec<f64> {
        match embedder.vector(tok) {
            Some(v) => v,
            None => {
                unknown_tokens += 1;
                unk.clone()
            }
        }
    };
    let mut total = 0.0;
    for rec in records {
        if rec.hyp_tokens.is_empty() {
            continue;
        }
        let hyp: Vec<Vec<f64>> = rec.hyp_tokens.iter().map(|t| lookup(t)).collect();
        let rf: Vec<Vec<f64>> = rec.ref_tokens.iter().map(|t| lookup(t)).collect();
        let best = |from: &[Vec<f64>], to: &[Vec<f64>]| -> f64 {
            from.iter()
                .map(|v| to.iter().map(|w| cosine(v, w)).fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / from.len() as f64
        };
        let p = best(&hyp, &rf);
        let r = best(&rf, &hyp);
        if p + r > 0.0 {
            total += 2.0 * p * r / (p + r);
        }
    }
    Ok(EmbedScore {
        score: 100.0 * total / records.len() as f64,
        unknown_tokens,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: String,
    pub bertscore_proxy: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge_l_f: f64,
    pub rouge_l_p: f64,
    pub rouge_l_r: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<SubjectRow>,
    pub total: SubjectRow,
    pub diagnostics: Vec<String>,
}

fn score_group(label: &str, records: &[DecodeRecord], embedder: &dyn TokenEmbedder) -> Result<SubjectRow> {
    let b1 = bleu_n(records, 1)?;
    let b2 = bleu_n(records, 2)?;
    let rl = rouge_l(records)?;
    let es = embedding_score(records, embedder)?;
    Ok(SubjectRow {
        subject: label.to_string(),
        bertscore_proxy: es.score,
        bleu1: b1.score,
        bleu2: b2.score,
        rouge_l_f: rl.f,
        rouge_l_p: rl.p,
        rouge_l_r: rl.r,
    })
}

/// Per-subject rows plus a Total row computed over the pooled record set.
pub fn build_report(records: &[DecodeRecord], embedder: &dyn TokenEmbedder) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::validation("no records to report on"));
    }
    let mut subjects: Vec<u32> = records.iter().map(|r| r.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut rows = Vec::with_capacity(subjects.len());
    let mut diagnostics = Vec::new();
    for s in subjects {
        let group: Vec<DecodeRecord> = records
            .iter()
            .filter(|r| r.subject_id == s)
            .cloned()
            .collect();
        let truncated = group.iter().filter(|r| r.truncated).count();
        if truncated > 0 {
            diagnostics.push(format!("subject {s}: {truncated} truncated generations"));
        }
        rows.push(score_group(&format!("subject {s}"), &group, embedder)?);
    }
    let total = score_group("Total", records, embedder)?;
    Ok(MetricReport {
        rows,
        total,
        diagnostics,
    })
}

const REPORT_COLUMNS: [&str; 7] = [
    "subject",
    "bertscore_proxy",
    "bleu1",
    "bleu2",
    "rouge_l_f",
    "rouge_l_p",
    "rouge_l_r",
];

fn row_values(row: &SubjectRow) -> [f64; 6] {
    [
        row.bertscore_proxy,
        row.bleu1,
        row.bleu2,
        row.rouge_l_f,
        row.rouge_l_p,
        row.rouge_l_r,
    ]
}

pub fn write_tsv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&REPORT_COLUMNS.join("\t"));
    out.push('\n');
    for row in report.rows.iter().chain(std::iter::once(&report.total)) {
        out.push_str(&row.subject);
        for v in row_values(row) {
            out.push_str(&format!("\t{v:.4}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_txt(report: &MetricReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut emit = |line: String| -> Result<()> {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    };
    emit("Caption evaluation (all values percent; embedding column is the".into())?;
    emit("bertscore_proxy, scored with the decoder's own embedding table)".into())?;
    emit(String::new())?;
    emit(format!(
        "{:<12} {:>10} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "subject", "bs_proxy", "bleu1", "bleu2", "rouge_l_f", "rouge_l_p", "rouge_l_r"
    ))?;
    for row in report.rows.iter().chain(std::iter::once(&report.total)) {
        let v = row_values(row);
        emit(format!(
            "{:<12} {:>10.2} {:>8.2} {:>8.2} {:>10.2} {:>10.2} {:>10.2}",
            row.subject, v[0], v[1], v[2], v[3], v[4], v[5]
        ))?;
    }
    if !report.diagnostics.is_empty() {
        emit(String::new())?;
        for d in &report.diagnostics {
            emit(format!("note: {d}"))?;
        }
    }
    Ok(())
}
