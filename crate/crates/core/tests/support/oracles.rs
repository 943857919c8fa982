//! Direct-formula reference implementations on plain nested vectors. They
//! share no code with the library: no stabilized reductions, no matrix type.
#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &cwcl_core::Matrix) -> Rows {
    m.row_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())).clamp(-1.0, 1.0)
}

/// `-1/N Σ_i log( exp(p_i·q_i/τ) / Σ_k exp(p_i·q_k/τ) )`
pub fn cl(p: &Rows, q: &Rows, tau: f64) -> f64 {
    let n = p.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (dot(&p[i], &q[i]) / tau).exp();
        let den: f64 = (0..n).map(|k| (dot(&p[i], &q[k]) / tau).exp()).sum();
        total += (num / den).ln();
    }
    -total / n as f64
}

/// `-1/N Σ_i 1/Σ_j w_ij Σ_j w_ij log( exp(p_i·q_j/τ) / Σ_k exp(p_i·q_k/τ) )`
pub fn cwcl(p: &Rows, q: &Rows, w: &Rows, tau: f64) -> f64 {
    let n = p.len();
    let mut total = 0.0;
    for i in 0..n {
        let den: f64 = (0..n).map(|k| (dot(&p[i], &q[k]) / tau).exp()).sum();
        let wsum: f64 = w[i].iter().sum();
        let mut row = 0.0;
        for j in 0..n {
            row += w[i][j] * ((dot(&p[i], &q[j]) / tau).exp() / den).ln();
        }
        total += row / wsum;
    }
    -total / n as f64
}

/// CWCL from p to q plus CL from q to p.
pub fn transfer(p: &Rows, q: &Rows, w_q: &Rows, tau: f64) -> f64 {
    cwcl(p, q, w_q, tau) + cl(q, p, tau)
}

/// Supervised contrastive loss as printed: positives are same-label `j ≠ i`,
/// the denominator runs over `k ≠ i`. Anchors without positives are skipped
/// and the mean is over the remaining anchors.
pub fn supcon(z: &Rows, labels: &[usize], tau: f64) -> Option<f64> {
    let n = z.len();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let den: f64 = (0..n)
            .filter(|&k| k != i)
            .map(|k| (dot(&z[i], &z[k]) / tau).exp())
            .sum();
        let s: f64 = pos
            .iter()
            .map(|&j| ((dot(&z[i], &z[j]) / tau).exp() / den).ln())
            .sum();
        total += s / pos.len() as f64;
    }
    (anchors > 0).then(|| -total / anchors as f64)
}

/// SupCon variant whose positive set and denominator both include `i`,
/// evaluated between two modalities.
pub fn supcon_inclusive(p: &Rows, q: &Rows, labels: &[usize], tau: f64) -> f64 {
    let n = p.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
        let den: f64 = (0..n).map(|k| (dot(&p[i], &q[k]) / tau).exp()).sum();
        let s: f64 = pos
            .iter()
            .map(|&j| ((dot(&p[i], &q[j]) / tau).exp() / den).ln())
            .sum();
        total += s / pos.len() as f64;
    }
    -total / n as f64
}

/// `w_ij = cos(q_i, q_j) / 2 + 1/2`.
pub fn linear_weights(q: &Rows) -> Rows {
    q.iter()
        .map(|a| q.iter().map(|b| cos(a, b) / 2.0 + 0.5).collect())
        .collect()
}

/// Recall@k by sorting every gallery item for every query. Ties go to the
/// lower gallery index.
pub fn recall_at_k(queries: &Rows, gallery: &Rows, truth: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for (qi, query) in queries.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(g, item)| (cos(query, item), g))
            .collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if order.iter().take(k).any(|&(_, g)| g == truth[qi]) {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

/// Argmax class per item, ties to the lowest class index.
pub fn argmax_classes(items: &Rows, classes: &Rows) -> Vec<usize> {
    items
        .iter()
        .map(|x| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (c, e) in classes.iter().enumerate() {
                let s = cos(x, e);
                if s > best_s {
                    best = c;
                    best_s = s;
                }
            }
            best
        })
        .collect()
}
