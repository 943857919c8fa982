//! Zero-shot evaluation: template-averaged class embeddings, nearest-class
//! classification, recall@k retrieval, class-sorted alignment matrices and
//! template-count sweeps. Ties always go to the lowest index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::encoders::{encode_u, encode_v, EncoderStack, MlpParams, TeacherEncoder};
use crate::error::{CwclError, Result};
use crate::numerics::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassEmbeddingMode {
    /// Normalize each template embedding, average, re-normalize.
    #[default]
    NormalizeThenAverage,
    /// Average the unnormalized projection outputs, then normalize.
    AverageRaw,
}

/// Mean of the rows of `embs`, re-normalized. Fails on an empty set or a
/// zero mean.
pub fn mean_direction(embs: &Matrix) -> Result<Vec<f64>> {
    if embs.rows() == 0 {
        return Err(CwclError::invalid("empty template set"));
    }
    let mut mean = vec![0.0; embs.cols()];
    for row in embs.row_iter() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = norm(&mean);
    if n < 1e-12 * embs.rows() as f64 {
        return Err(CwclError::Undefined(
            "template embeddings average to zero; class embedding has no direction".into(),
        ));
    }
    Ok(mean.into_iter().map(|x| x / n).collect())
}

pub fn class_embedding(
    templates: &Matrix,
    teacher: &TeacherEncoder,
    mode: ClassEmbeddingMode,
) -> Result<Vec<f64>> {
    if templates.rows() == 0 {
        return Err(CwclError::invalid("empty template set"));
    }
    match mode {
        ClassEmbeddingMode::NormalizeThenAverage => {
            mean_direction(&encode_v(teacher, templates)?.post)
        }
        ClassEmbeddingMode::AverageRaw => {
            let pre = encode_v(teacher, templates)?.pre;
            mean_direction(&teacher.projection.forward(&pre)?)
        }
    }
}

/// One class embedding per class from the first `k` templates of each
/// (all templates when `k` is `None`).
pub fn class_embeddings(
    ds: &PairedDataset,
    teacher: &TeacherEncoder,
    k: Option<usize>,
    mode: ClassEmbeddingMode,
) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(ds.num_classes);
    for c in 0..ds.num_classes {
        let all = ds.templates_for(c);
        let take = k.unwrap_or(all.rows());
        if take == 0 || take > all.rows() {
            return Err(CwclError::invalid(format!(
                "class {c} has {} templates, {take} requested",
                all.rows()
            )));
        }
        let idx: Vec<usize> = (0..take).collect();
        rows.push(class_embedding(&all.select_rows(&idx), teacher, mode)?);
    }
    Matrix::from_rows(&rows)
}

fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(CwclError::shape(format!(
            "embedding widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let na = a.row_norms();
    let nb = b.row_norms();
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        let d = na[i] * nb[j];
        if d == 0.0 {
            0.0
        } else {
            (dot(a.row(i), b.row(j)) / d).clamp(-1.0, 1.0)
        }
    }))
}

/// Indices sorted by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub predictions: Vec<usize>,
    /// Five best classes per item (fewer when there are fewer classes).
    pub top5: Vec<Vec<usize>>,
    pub top1_accuracy: f64,
    pub top5_accuracy: f64,
}

/// Nearest class embedding by cosine similarity.
pub fn classify_embeddings(
    items: &Matrix,
    class_embs: &Matrix,
    labels: &[usize],
) -> Result<Classification> {
    if class_embs.rows() == 0 {
        return Err(CwclError::invalid("need at least one class"));
    }
    if labels.len() != items.rows() {
        return Err(CwclError::shape(format!(
            "{} labels for {} items",
            labels.len(),
            items.rows()
        )));
    }
    let sims = cosine_matrix(items, class_embs)?;
    let mut predictions = Vec::with_capacity(items.rows());
    let mut top5 = Vec::with_capacity(items.rows());
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (i, &label) in labels.iter().enumerate() {
        let order = ranking(sims.row(i));
        let best: Vec<usize> = order.into_iter().take(5).collect();
        hit1 += usize::from(best[0] == label);
        hit5 += usize::from(best.contains(&label));
        predictions.push(best[0]);
        top5.push(best);
    }
    let n = items.rows().max(1) as f64;
    Ok(Classification {
        predictions,
        top5,
        top1_accuracy: hit1 as f64 / n,
        top5_accuracy: hit5 as f64 / n,
    })
}

/// Encodes U-modality items and classifies them.
pub fn classify(
    items: &Matrix,
    labels: &[usize],
    class_embs: &Matrix,
    encoder_u: &MlpParams,
) -> Result<Classification> {
    classify_embeddings(&encode_u(encoder_u, items)?, class_embs, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub recall: f64,
}

/// Fraction of queries whose true gallery item ranks within the top `k`.
pub fn recall_at_k(
    queries: &Matrix,
    gallery: &Matrix,
    truth: &[usize],
    ks: &[usize],
) -> Result<Vec<RecallAtK>> {
    if truth.len() != queries.rows() {
        return Err(CwclError::shape("one ground-truth index per query"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > gallery.rows()) {
        return Err(CwclError::invalid(format!(
            "k = {k} outside 1..={}",
            gallery.rows()
        )));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= gallery.rows()) {
        return Err(CwclError::invalid(format!("ground truth {t} outside gallery")));
    }
    let sims = cosine_matrix(queries, gallery)?;
    // Rank of the true item: strictly better scores, plus ties at lower index.
    let ranks: Vec<usize> = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = sims.row(i);
            let s = row[t];
            row.iter()
                .enumerate()
                .filter(|&(j, &x)| x > s || (x == s && j < t))
                .count()
        })
        .collect();
    let n = queries.rows().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| RecallAtK {
            k,
            recall: ranks.iter().filter(|&&r| r < k).count() as f64 / n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    /// Original item indices of the rows, sorted by class.
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub similarity: Matrix,
    /// Mean within-class minus mean cross-class similarity.
    pub block_contrast: f64,
}

fn class_sorted(labels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by_key(|&i| (labels[i], i));
    idx
}

pub fn alignment_matrix(
    u: &Matrix,
    v: &Matrix,
    u_labels: &[usize],
    v_labels: &[usize],
) -> Result<AlignmentMatrix> {
    if u_labels.len() != u.rows() || v_labels.len() != v.rows() {
        return Err(CwclError::shape("one label per item"));
    }
    let row_ids = class_sorted(u_labels);
    let col_ids = class_sorted(v_labels);
    let similarity = cosine_matrix(&u.select_rows(&row_ids), &v.select_rows(&col_ids))?;
    let row_labels: Vec<usize> = row_ids.iter().map(|&i| u_labels[i]).collect();
    let col_labels: Vec<usize> = col_ids.iter().map(|&j| v_labels[j]).collect();
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (i, &ri) in row_labels.iter().enumerate() {
        for (j, &cj) in col_labels.iter().enumerate() {
            if ri == cj {
                within += similarity[(i, j)];
                nw += 1;
            } else {
                cross += similarity[(i, j)];
                nc += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(AlignmentMatrix {
        row_ids,
        col_ids,
        row_labels,
        col_labels,
        similarity,
        block_contrast: mean(within, nw) - mean(cross, nc),
    })
}

impl AlignmentMatrix {
    /// Header of column labels, then per row its label and similarities to
    /// six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.col_labels {
            write!(out, ",{l}").expect("string write");
        }
        out.push('\n');
        for (i, l) in self.row_labels.iter().enumerate() {
            write!(out, "{l}").expect("string write");
            for x in self.similarity.row(i) {
                write!(out, ",{x:.6}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub top1_accuracy: f64,
    /// `(full - acc_k) / full`; zero when the full accuracy is zero.
    pub relative_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub full_templates: usize,
    pub full_accuracy: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,top1_accuracy,relative_drop\n");
        for r in &self.rows {
            writeln!(out, "{},{:.6},{:.6}", r.k, r.top1_accuracy, r.relative_drop)
                .expect("string write");
        }
        out
    }

    pub fn drop_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.relative_drop)
    }
}

/// Eval-split U features and superclass labels.
pub fn eval_items(ds: &PairedDataset) -> (Matrix, Vec<usize>) {
    let idx = ds.eval_indices();
    let labels = idx.iter().map(|&i| ds.superclass[i]).collect();
    (ds.u_features.select_rows(&idx), labels)
}

pub fn template_sweep(
    ds: &PairedDataset,
    stack: &EncoderStack,
    ks: &[usize],
    mode: ClassEmbeddingMode,
) -> Result<SweepTable> {
    let (items, labels) = eval_items(ds);
    let p = encode_u(&stack.u, &items)?;
    let full_templates = (0..ds.num_classes)
        .map(|c| ds.templates_for(c).rows())
        .min()
        .unwrap_or(0);
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > full_templates) {
        return Err(CwclError::invalid(format!(
            "k = {k} exceeds the {full_templates} templates available per class"
        )));
    }
    let full = class_embeddings(ds, &stack.teacher, None, mode)?;
    let full_accuracy = classify_embeddings(&p, &full, &labels)?.top1_accuracy;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let ce = class_embeddings(ds, &stack.teacher, Some(k), mode)?;
        let acc = classify_embeddings(&p, &ce, &labels)?.top1_accuracy;
        let relative_drop = if full_accuracy > 0.0 {
            (full_accuracy - acc) / full_accuracy
        } else {
            0.0
        };
        rows.push(SweepRow {
            k,
            top1_accuracy: acc,
            relative_drop,
        });
    }
    Ok(SweepTable {
        full_templates,
        full_accuracy,
        rows,
    })
}

/// Summary numbers for one trained model on the eval split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub top1_accuracy: f64,
    pub top5_accuracy: f64,
    /// Top-1 restricted to items from superclasses never seen in training.
    pub held_out_top1_accuracy: Option<f64>,
    pub block_contrast: f64,
}

pub fn evaluate(ds: &PairedDataset, stack: &EncoderStack, mode: ClassEmbeddingMode) -> Result<ZeroShotReport> {
    let idx = ds.eval_indices();
    let (items, labels) = eval_items(ds);
    let p = encode_u(&stack.u, &items)?;
    let ce = class_embeddings(ds, &stack.teacher, None, mode)?;
    let cls = classify_embeddings(&p, &ce, &labels)?;

    let held: Vec<usize> = (0..labels.len())
        .filter(|&i| ds.held_out_classes.contains(&labels[i]))
        .collect();
    let held_out_top1_accuracy = (!held.is_empty()).then(|| {
        held.iter()
            .filter(|&&i| cls.predictions[i] == labels[i])
            .count() as f64
            / held.len() as f64
    });

    let q = encode_v(&stack.teacher, &ds.v_features.select_rows(&idx))?.post;
    let align = alignment_matrix(&p, &q, &labels, &labels)?;
    Ok(ZeroShotReport {
        top1_accuracy: cls.top1_accuracy,
        top5_accuracy: cls.top5_accuracy,
        held_out_top1_accuracy,
        block_contrast: align.block_contrast,
    })
}

/// Paired-retrieval recall on the eval split in both directions.
pub fn eval_retrieval(ds: &PairedDataset, stack: &EncoderStack, ks: &[usize]) -> Result<(Vec<RecallAtK>, Vec<RecallAtK>)> {
    let idx = ds.eval_indices();
    let p = encode_u(&stack.u, &ds.u_features.select_rows(&idx))?;
    let q = encode_v(&stack.teacher, &ds.v_features.select_rows(&idx))?.post;
    let truth: Vec<usize> = (0..idx.len()).collect();
    Ok((recall_at_k(&p, &q, &truth, ks)?, recall_at_k(&q, &p, &truth, ks)?))
}

/// Class-sorted eval-split alignment between U embeddings and paired V
/// embeddings.
pub fn eval_alignment(ds: &PairedDataset, stack: &EncoderStack) -> Result<AlignmentMatrix> {
    let idx = ds.eval_indices();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.superclass[i]).collect();
    let p = encode_u(&stack.u, &ds.u_features.select_rows(&idx))?;
    let q = encode_v(&stack.teacher, &ds.v_features.select_rows(&idx))?.post;
    alignment_matrix(&p, &q, &labels, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize_rows, Rng};

    fn unit(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        l2_normalize_rows(&Matrix::random_normal(n, d, 1.0, rng)).unwrap()
    }

    #[test]
    fn single_template_is_its_own_embedding() {
        let m = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let e = mean_direction(&l2_normalize_rows(&m).unwrap()).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn antipodal_templates_fail() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert!(matches!(mean_direction(&m), Err(CwclError::Undefined(_))));
        assert!(mean_direction(&Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn mean_direction_matches_script_and_ignores_order() {
        let mut rng = Rng::new(13);
        let t = unit(5, 6, &mut rng);
        let got = mean_direction(&t).unwrap();
        let mut m = [0.0; 6];
        for i in 0..5 {
            for j in 0..6 {
                m[j] += t[(i, j)] / 5.0;
            }
        }
        let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..6 {
            assert!((got[j] - m[j] / n).abs() < 1e-12);
        }
        let rev = t.select_rows(&[4, 3, 2, 1, 0]);
        let got_rev = mean_direction(&rev).unwrap();
        for j in 0..6 {
            assert!((got[j] - got_rev[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_exact_and_tie() {
        let mut rng = Rng::new(14);
        let classes = unit(4, 5, &mut rng);
        let items = classes.select_rows(&[2]);
        let c = classify_embeddings(&items, &classes, &[2]).unwrap();
        assert_eq!(c.predictions, vec![2]);
        assert_eq!(c.top1_accuracy, 1.0);

        let same = Matrix::from_rows(&[[1.0, 0.0]; 3]).unwrap();
        let items = unit(4, 2, &mut rng);
        let c = classify_embeddings(&items, &same, &[0, 1, 2, 0]).unwrap();
        assert_eq!(c.predictions, vec![0; 4]);
        assert_eq!(c.top5[0], vec![0, 1, 2]);
    }

    #[test]
    fn classify_matches_brute_force() {
        let mut rng = Rng::new(15);
        let classes = unit(4, 6, &mut rng);
        let items = unit(20, 6, &mut rng);
        let labels: Vec<usize> = (0..20).map(|_| rng.below(4)).collect();
        let c = classify_embeddings(&items, &classes, &labels).unwrap();
        let mut correct = 0;
        for i in 0..20 {
            let mut best = 0;
            for k in 1..4 {
                if dot(items.row(i), classes.row(k)) > dot(items.row(i), classes.row(best)) {
                    best = k;
                }
            }
            assert_eq!(c.predictions[i], best);
            correct += usize::from(best == labels[i]);
        }
        assert_eq!(c.top1_accuracy, correct as f64 / 20.0);
    }

    #[test]
    fn recall_basics() {
        let g = Matrix::identity(4);
        let r = recall_at_k(&g, &g, &[0, 1, 2, 3], &[1]).unwrap();
        assert_eq!(r[0].recall, 1.0);

        let mut rng = Rng::new(16);
        let q = unit(6, 3, &mut rng);
        let gal = unit(6, 3, &mut rng);
        let r = recall_at_k(&q, &gal, &[0, 1, 2, 3, 4, 5], &[6]).unwrap();
        assert_eq!(r[0].recall, 1.0);
        assert!(recall_at_k(&q, &gal, &[0; 6], &[7]).is_err());
        assert!(recall_at_k(&q, &gal, &[0; 6], &[0]).is_err());
    }

    #[test]
    fn recall_tie_goes_to_lower_index() {
        // gallery items 0 and 1 identical: query whose truth is 1 ranks second
        let g = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let r = recall_at_k(&q, &g, &[1], &[1, 2]).unwrap();
        assert_eq!(r[0].recall, 0.0);
        assert_eq!(r[1].recall, 1.0);
    }

    #[test]
    fn alignment_identity_like() {
        let mut rng = Rng::new(17);
        let e = unit(4, 8, &mut rng);
        let a = alignment_matrix(&e, &e, &[3, 1, 2, 0], &[3, 1, 2, 0]).unwrap();
        assert_eq!(a.row_ids, vec![3, 1, 2, 0]);
        let mut off = 0.0;
        for i in 0..4 {
            assert!((a.similarity[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if i != j {
                    off += a.similarity[(i, j)];
                }
            }
        }
        assert!((a.block_contrast - (1.0 - off / 12.0)).abs() < 1e-12);
    }

    #[test]
    fn alignment_csv_layout() {
        let e = Matrix::identity(2);
        let a = alignment_matrix(&e, &e, &[1, 0], &[1, 0]).unwrap();
        assert_eq!(a.to_csv(), "label,0,1\n0,1.000000,0.000000\n1,0.000000,1.000000\n");
    }
}
