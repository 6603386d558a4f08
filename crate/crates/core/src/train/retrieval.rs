use crate::error::{Error, Result};
use crate::losses::{ITM_MATCH, ITM_MISMATCH};
use crate::model::Model;
use crate::synth::SampleRecord;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::vision::patchify;

pub const MAX_RETRIEVAL_RECORDS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable {
    pub n: usize,
    pub ks: Vec<usize>,
    /// Image query, caption candidates.
    pub text_retrieval: Vec<f64>,
    /// Caption query, image candidates.
    pub image_retrieval: Vec<f64>,
}

impl RecallTable {
    pub fn text_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.text_retrieval[i])
    }

    pub fn image_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.image_retrieval[i])
    }
}

/// Row-major `n × n` matching scores: entry `(i, j)` is the match-minus-
/// mismatch logit for image `i` with caption `j`. Each image and caption is
/// encoded once; only the cross-modality layers run per pair.
pub fn score_matrix(model: &Model, vocab: &Vocabulary, records: &[SampleRecord]) -> Result<Vec<f64>> {
    let n = records.len();
    if n > MAX_RETRIEVAL_RECORDS {
        return Err(Error::Input(format!(
            "retrieval over {n} records exceeds the limit of {MAX_RETRIEVAL_RECORDS}"
        )));
    }
    let cfg = model.config();
    let mut images: Vec<Tensor> = Vec::with_capacity(n);
    for r in records {
        let mut g = model.graph(false);
        let grid = patchify(&r.image, cfg.patch_size)?;
        let enc = model.encode_image(&mut g, &grid)?;
        images.push(g.value(enc.stream).clone());
    }
    let mut captions: Vec<(Tensor, usize)> = Vec::with_capacity(n);
    for r in records {
        let mut g = model.graph(false);
        let seq = vocab.encode(&r.caption, cfg.max_seq_len)?;
        let lang = model.forward_language(&mut g, &seq)?;
        captions.push((g.value(lang).clone(), seq.attention_len));
    }
    let mut scores = vec![0.0; n * n];
    for (i, img) in images.iter().enumerate() {
        for (j, (lang, len)) in captions.iter().enumerate() {
            let mut g = model.graph(false);
            let v = g.constant(img.clone());
            let l = g.constant(lang.clone());
            let state = model.fuse(&mut g, l, *len, v)?;
            let logits = model.itm_head(&mut g, state.lang)?;
            let d = g.value(logits).data();
            scores[i * n + j] = d[ITM_MATCH] - d[ITM_MISMATCH];
        }
    }
    Ok(scores)
}

/// Zero-based rank of `target` among `scores`, best first; equal scores are
/// ordered by lower index.
pub fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let s = scores.clone().nth(target).expect("target within candidates");
    scores
        .enumerate()
        .filter(|&(j, x)| x > s || (x == s && j < target))
        .count()
}

/// Recall@K in both directions from one score matrix; the image-retrieval
/// direction reads the same matrix column-wise.
pub fn recall_from_scores(scores: &[f64], n: usize, ks: &[usize]) -> RecallTable {
    let mut text_hits = vec![0usize; ks.len()];
    let mut image_hits = vec![0usize; ks.len()];
    for q in 0..n {
        let tr = rank_of(scores[q * n..(q + 1) * n].iter().copied(), q);
        let ir = rank_of((0..n).map(|i| scores[i * n + q]), q);
        for (h, &k) in ks.iter().enumerate() {
            text_hits[h] += (tr < k) as usize;
            image_hits[h] += (ir < k) as usize;
        }
    }
    let frac = |hits: Vec<usize>| hits.into_iter().map(|h| h as f64 / n.max(1) as f64).collect();
    RecallTable {
        n,
        ks: ks.to_vec(),
        text_retrieval: frac(text_hits),
        image_retrieval: frac(image_hits),
    }
}

pub fn eval_retrieval(
    model: &Model,
    vocab: &Vocabulary,
    records: &[SampleRecord],
    ks: &[usize],
) -> Result<RecallTable> {
    let scores = score_matrix(model, vocab, records)?;
    Ok(recall_from_scores(&scores, records.len(), ks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(rank_of([1.0, 1.0, 1.0].into_iter(), 0), 0);
        assert_eq!(rank_of([1.0, 1.0, 1.0].into_iter(), 2), 2);
        assert_eq!(rank_of([0.0, 2.0, 1.0].into_iter(), 2), 1);
    }

    #[test]
    fn identity_scores_give_perfect_recall() {
        let n = 4;
        let scores: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        let t = recall_from_scores(&scores, n, &[1, 5]);
        assert_eq!(t.text_retrieval, vec![1.0, 1.0]);
        assert_eq!(t.image_retrieval, vec![1.0, 1.0]);
    }

    #[test]
    fn directions_read_rows_and_columns() {
        // image 0 prefers caption 1 and image 1 ties; caption 0 still ranks
        // image 0 first
        let scores = [1.0, 2.0, 0.0, 0.0];
        let t = recall_from_scores(&scores, 2, &[1]);
        assert_eq!(t.text_retrieval, vec![0.0]);
        assert_eq!(t.image_retrieval, vec![0.5]);
    }
}
