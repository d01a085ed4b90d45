//! Every loss term of the objective as a differentiable scalar field with
//! analytic gradients w.r.t. its tensor inputs.
//!
//! Projected features come in as (nominally unit) row matrices and are used
//! through raw dot products in the contrastive terms; the instance-context
//! term re-normalizes internally so its cosine distances and gradients stay
//! exact for any nonzero input. Classifier terms take probability rows and
//! return logit gradients via the usual softmax identities, so the caller
//! never materializes a softmax Jacobian.

use serde::{Deserialize, Serialize};

use crate::error::{GcdError, Result};
use crate::mining::{PairLabels, PrototypeSet};
use crate::numeric::{dot, Mat64, LOG_CLAMP};

/// Temperatures and weights for the composite objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Self-supervised representation temperature.
    pub tau_u: f64,
    /// Supervised representation temperature.
    pub tau_sup: f64,
    /// Student classifier temperature.
    pub tau_s: f64,
    /// Teacher classifier temperature (scheduled by the trainer; this is the
    /// current value).
    pub tau_t: f64,
    /// Cluster-context temperature.
    pub tau_proto: f64,
    /// Supervised/unsupervised balance in the baseline.
    pub lambda: f64,
    /// Mean-entropy regularizer weight.
    pub epsilon: f64,
    /// Margin of the instance-context loss.
    pub delta: f64,
    /// Instance-context weight.
    pub lambda_n: f64,
    /// Cluster-context weight.
    pub lambda_c: f64,
    /// Clamp the dissimilar-pair term of the instance-context loss at zero.
    pub hinge_clamp: bool,
    /// Treat teacher probabilities as constants.
    pub detach_teacher: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_u: 0.07,
            tau_sup: 0.1,
            tau_s: 0.1,
            tau_t: 0.07,
            tau_proto: 0.1,
            lambda: 0.35,
            epsilon: 1.0,
            delta: 0.5,
            lambda_n: 0.1,
            lambda_c: 0.3,
            hinge_clamp: true,
            detach_teacher: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [
            ("tau_u", self.tau_u),
            ("tau_sup", self.tau_sup),
            ("tau_s", self.tau_s),
            ("tau_t", self.tau_t),
            ("tau_proto", self.tau_proto),
        ] {
            if tau <= 0.0 {
                return Err(GcdError::Config(format!("{name} must be positive, got {tau}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(GcdError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.epsilon < 0.0 {
            return Err(GcdError::Config(format!("epsilon {} negative", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta <= 2.0) {
            return Err(GcdError::Config(format!("delta {} outside (0, 2]", self.delta)));
        }
        if self.lambda_n < 0.0 || self.lambda_c < 0.0 {
            return Err(GcdError::Config("lambda_n and lambda_c must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-step loss values. `total = baseline + lambda_n * l_n + lambda_c * l_c`
/// and `baseline = (1 - lambda)(rep_u + cls_u) + lambda (rep_s + cls_l)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub rep_u: f64,
    pub rep_s: f64,
    pub cls_l: f64,
    pub cls_u: f64,
    /// epsilon * H(mean prediction); already subtracted inside cls_u.
    pub entropy_term: f64,
    pub l_n: f64,
    pub l_c: f64,
    pub baseline: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.rep_u,
            self.rep_s,
            self.cls_l,
            self.cls_u,
            self.entropy_term,
            self.l_n,
            self.l_c,
            self.baseline,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_same_shape(a: &Mat64, b: &Mat64) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(GcdError::ShapeMismatch {
            expected: format!("{}x{}", a.rows(), a.cols()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    Ok(())
}

fn validate_probability_rows(m: &Mat64, name: &str) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row(i);
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(GcdError::NotAProbabilityVector {
                reason: format!("{name} row {i} has a negative or non-finite entry"),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GcdError::NotAProbabilityVector { reason: format!("{name} row {i} sums to {sum}") });
        }
    }
    Ok(())
}

/// Max-shifted softmax together with its log-sum-exp.
fn softmax_lse(scores: &[f64]) -> (Vec<f64>, f64) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / sum).collect(), max + sum.ln())
}

// ---------------------------------------------------------------------------
// Representation losses
// ---------------------------------------------------------------------------

/// Self-supervised contrastive loss over paired views. The anchor is the
/// second view; the positive is its own first-view pair; the denominator
/// runs over all first-view rows, positive included.
pub fn loss_rep_u(z_a: &Mat64, z_b: &Mat64, tau: f64) -> Result<(f64, Mat64, Mat64)> {
    check_same_shape(z_a, z_b)?;
    if tau <= 0.0 {
        return Err(GcdError::NonPositiveTemperature(tau));
    }
    let batch = z_a.rows();
    if batch == 0 {
        return Err(GcdError::EmptyInput("representation batch"));
    }
    let inv_tau = 1.0 / tau;
    let inv_batch = 1.0 / batch as f64;
    // cross[j][i] = z_a[j] . z_b[i] / tau
    let mut cross = z_a.matmul_transpose(z_b);
    cross.scale(inv_tau);

    let mut loss = 0.0;
    let mut d_z_a = Mat64::zeros(batch, z_a.cols());
    let mut d_z_b = Mat64::zeros(batch, z_b.cols());
    let mut column = vec![0.0; batch];
    for anchor in 0..batch {
        for (j, slot) in column.iter_mut().enumerate() {
            *slot = cross.get(j, anchor);
        }
        let (soft, lse) = softmax_lse(&column);
        loss += (lse - column[anchor]) * inv_batch;
        for (j, &s) in soft.iter().enumerate() {
            let coeff = (s - f64::from(u8::from(j == anchor))) * inv_tau * inv_batch;
            if coeff == 0.0 {
                continue;
            }
            // d/d z_a[j] += coeff * z_b[anchor]; d/d z_b[anchor] += coeff * z_a[j]
            for (g, &v) in d_z_a.row_mut(j).iter_mut().zip(z_b.row(anchor)) {
                *g += coeff * v;
            }
            for (g, &v) in d_z_b.row_mut(anchor).iter_mut().zip(z_a.row(j)) {
                *g += coeff * v;
            }
        }
    }
    Ok((loss, d_z_a, d_z_b))
}

/// Supervised contrastive loss over the labeled subset. Anchors are
/// first-view rows; positives are other same-label second-view rows; the
/// denominator runs over all second-view rows except the anchor's own index.
/// Anchors without positives are skipped from the outer mean.
pub fn loss_rep_s(z_a: &Mat64, z_b: &Mat64, labels: &[i32], tau: f64) -> Result<(f64, Mat64, Mat64)> {
    check_same_shape(z_a, z_b)?;
    if tau <= 0.0 {
        return Err(GcdError::NonPositiveTemperature(tau));
    }
    let batch = z_a.rows();
    if batch == 0 {
        return Err(GcdError::NoLabeledSamples);
    }
    if labels.len() != batch {
        return Err(GcdError::LengthMismatch { left: labels.len(), right: batch });
    }
    let positives: Vec<Vec<usize>> = (0..batch)
        .map(|i| (0..batch).filter(|&p| p != i && labels[p] == labels[i]).collect())
        .collect();
    let anchors: Vec<usize> = (0..batch).filter(|&i| !positives[i].is_empty()).collect();
    let mut d_z_a = Mat64::zeros(batch, z_a.cols());
    let mut d_z_b = Mat64::zeros(batch, z_b.cols());
    if anchors.is_empty() {
        return Ok((0.0, d_z_a, d_z_b));
    }
    let inv_tau = 1.0 / tau;
    let anchor_weight = 1.0 / anchors.len() as f64;
    // cross[i][n] = z_a[i] . z_b[n] / tau
    let mut cross = z_a.matmul_transpose(z_b);
    cross.scale(inv_tau);

    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(batch.saturating_sub(1));
    let mut others = Vec::with_capacity(batch.saturating_sub(1));
    for &i in &anchors {
        scores.clear();
        others.clear();
        for n in 0..batch {
            if n != i {
                others.push(n);
                scores.push(cross.get(i, n));
            }
        }
        let (soft, lse) = softmax_lse(&scores);
        let pos_weight = 1.0 / positives[i].len() as f64;
        for &p in &positives[i] {
            loss += (lse - cross.get(i, p)) * anchor_weight * pos_weight;
            // Positive part: -z_b[p] / tau into the anchor, -z_a[i] / tau into p.
            let w = anchor_weight * pos_weight * inv_tau;
            for (g, &v) in d_z_a.row_mut(i).iter_mut().zip(z_b.row(p)) {
                *g -= w * v;
            }
            for (g, &v) in d_z_b.row_mut(p).iter_mut().zip(z_a.row(i)) {
                *g -= w * v;
            }
        }
        // Denominator part is shared by every positive of this anchor.
        let w = anchor_weight * inv_tau;
        for (slot, &n) in others.iter().enumerate() {
            let a = soft[slot] * w;
            for (g, &v) in d_z_a.row_mut(i).iter_mut().zip(z_b.row(n)) {
                *g += a * v;
            }
            for (g, &v) in d_z_b.row_mut(n).iter_mut().zip(z_a.row(i)) {
                *g += a * v;
            }
        }
    }
    Ok((loss, d_z_a, d_z_b))
}

// ---------------------------------------------------------------------------
// Classifier losses
// ---------------------------------------------------------------------------

/// Mean-entropy regularizer over both views' student predictions.
/// Returns `H(p_bar)` and the gradients of `-epsilon * H(p_bar)` w.r.t. the
/// student logits of each view.
pub fn entropy_regularizer(student_a: &Mat64, student_b: &Mat64, epsilon: f64) -> Result<(f64, Mat64, Mat64)> {
    check_same_shape(student_a, student_b)?;
    validate_probability_rows(student_a, "student_a")?;
    validate_probability_rows(student_b, "student_b")?;
    let batch = student_a.rows();
    let classes = student_a.cols();
    if batch == 0 {
        return Err(GcdError::EmptyInput("entropy batch"));
    }
    let scale = 1.0 / (2.0 * batch as f64);
    let mut p_bar = vec![0.0; classes];
    for i in 0..batch {
        for (k, p) in p_bar.iter_mut().enumerate() {
            *p += (student_a.get(i, k) + student_b.get(i, k)) * scale;
        }
    }
    let h: f64 = p_bar.iter().map(|&p| if p > 0.0 { -p * p.max(LOG_CLAMP).ln() } else { 0.0 }).sum();
    // d(-eps H)/d p_bar_k = eps (log p_bar_k + 1), then through each row's
    // softmax: p_ik (g_k - sum_j g_j p_ij).
    let g: Vec<f64> = p_bar.iter().map(|&p| epsilon * (p.max(LOG_CLAMP).ln() + 1.0)).collect();
    let per_view = |view: &Mat64| {
        let mut d = Mat64::zeros(batch, classes);
        for i in 0..batch {
            let row = view.row(i);
            let inner: f64 = row.iter().zip(&g).map(|(&p, &gk)| p * gk).sum();
            for (k, slot) in d.row_mut(i).iter_mut().enumerate() {
                *slot = scale * row[k] * (g[k] - inner);
            }
        }
        d
    };
    let d_a = per_view(student_a);
    let d_b = per_view(student_b);
    Ok((h, d_a, d_b))
}

/// Classifier loss values and logit gradients.
pub struct ClsOutput {
    pub cls_l: f64,
    pub cls_u: f64,
    /// epsilon * H(mean prediction), already subtracted inside cls_u.
    pub entropy_term: f64,
    /// Gradients of `(1 - lambda) cls_u + lambda cls_l` w.r.t. student logits.
    pub d_student_a: Mat64,
    pub d_student_b: Mat64,
    /// Teacher-logit gradients; populated only when `detach_teacher` is off.
    pub d_teacher_a: Option<Mat64>,
    pub d_teacher_b: Option<Mat64>,
}

/// Supervised cross-entropy over labeled rows (both views averaged) plus
/// cross-view teacher/student self-distillation with the mean-entropy
/// regularizer. Each view's student is matched to the *other* view's
/// teacher. Returned gradients are for the lambda-combined classifier loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_cls(
    student_a: &Mat64,
    student_b: &Mat64,
    teacher_a: &Mat64,
    teacher_b: &Mat64,
    labels: &[i32],
    labeled_mask: &[bool],
    epsilon: f64,
    lambda: f64,
    detach_teacher: bool,
) -> Result<ClsOutput> {
    check_same_shape(student_a, student_b)?;
    check_same_shape(student_a, teacher_a)?;
    check_same_shape(student_a, teacher_b)?;
    for (m, name) in [
        (student_a, "student_a"),
        (student_b, "student_b"),
        (teacher_a, "teacher_a"),
        (teacher_b, "teacher_b"),
    ] {
        validate_probability_rows(m, name)?;
    }
    let batch = student_a.rows();
    let classes = student_a.cols();
    if batch == 0 {
        return Err(GcdError::EmptyInput("classifier batch"));
    }
    if labels.len() != batch || labeled_mask.len() != batch {
        return Err(GcdError::LengthMismatch { left: labels.len(), right: batch });
    }

    let mut d_student_a = Mat64::zeros(batch, classes);
    let mut d_student_b = Mat64::zeros(batch, classes);

    // Supervised term over labeled rows, both views averaged.
    let labeled: Vec<usize> = (0..batch).filter(|&i| labeled_mask[i]).collect();
    let mut cls_l = 0.0;
    if !labeled.is_empty() {
        let ce_w = 1.0 / (2.0 * labeled.len() as f64);
        let w = lambda * ce_w;
        for &i in &labeled {
            let y = labels[i];
            if y < 0 || y as usize >= classes {
                return Err(GcdError::InvariantViolation(format!("labeled row {i} has label {y}")));
            }
            let y = y as usize;
            for (view, d_view) in [(student_a, &mut d_student_a), (student_b, &mut d_student_b)] {
                cls_l -= view.get(i, y).max(LOG_CLAMP).ln() * ce_w;
                // d CE / d logit = p - onehot(y)
                for (k, slot) in d_view.row_mut(i).iter_mut().enumerate() {
                    *slot += w * (view.get(i, k) - f64::from(u8::from(k == y)));
                }
            }
        }
    }

    // Cross-view self-distillation: student of one view against the teacher
    // of the other.
    let ce_w = 1.0 / (2.0 * batch as f64);
    let w = (1.0 - lambda) * ce_w;
    let mut ce_u = 0.0;
    let mut d_teacher_a = if detach_teacher { None } else { Some(Mat64::zeros(batch, classes)) };
    let mut d_teacher_b = if detach_teacher { None } else { Some(Mat64::zeros(batch, classes)) };
    for (student, teacher, d_student, d_teacher) in [
        (student_a, teacher_b, &mut d_student_a, &mut d_teacher_b),
        (student_b, teacher_a, &mut d_student_b, &mut d_teacher_a),
    ] {
        for i in 0..batch {
            let t_row = teacher.row(i);
            let s_row = student.row(i);
            let mut ce = 0.0;
            for (&t, &s) in t_row.iter().zip(s_row) {
                ce -= t * s.max(LOG_CLAMP).ln();
            }
            ce_u += ce * ce_w;
            let t_mass: f64 = t_row.iter().sum();
            for (k, slot) in d_student.row_mut(i).iter_mut().enumerate() {
                *slot += w * (t_mass * s_row[k] - t_row[k]);
            }
            if let Some(d_t) = d_teacher.as_mut() {
                // d CE / d teacher logit j = t_j (sum_k t_k log p_k - log p_j)
                let inner: f64 = t_row.iter().zip(s_row).map(|(&t, &s)| t * s.max(LOG_CLAMP).ln()).sum();
                for (j, slot) in d_t.row_mut(i).iter_mut().enumerate() {
                    *slot += w * t_row[j] * (inner - s_row[j].max(LOG_CLAMP).ln());
                }
            }
        }
    }

    let (h, d_ent_a, d_ent_b) = entropy_regularizer(student_a, student_b, epsilon)?;
    let entropy_term = epsilon * h;
    let cls_u = ce_u - entropy_term;
    for (d, e) in [(&mut d_student_a, &d_ent_a), (&mut d_student_b, &d_ent_b)] {
        for (slot, &g) in d.data_mut().iter_mut().zip(e.data()) {
            *slot += (1.0 - lambda) * g;
        }
    }

    Ok(ClsOutput { cls_l, cls_u, entropy_term, d_student_a, d_student_b, d_teacher_a, d_teacher_b })
}

// ---------------------------------------------------------------------------
// Contextual losses
// ---------------------------------------------------------------------------

/// Instance-level contextual loss: mined-similar pairs are pulled by their
/// cosine distance, dissimilar ones pushed below the margin. Rows are
/// re-normalized internally, so gradients are exact for any nonzero input.
pub fn loss_context_instance(
    z: &Mat64,
    pairs: &PairLabels,
    delta: f64,
    hinge_clamp: bool,
) -> Result<(f64, Mat64)> {
    let batch = z.rows();
    if batch < 2 {
        return Err(GcdError::BatchTooSmall(batch));
    }
    if pairs.len() != batch {
        return Err(GcdError::LengthMismatch { left: pairs.len(), right: batch });
    }
    let mut unit = z.clone();
    let mut norms = Vec::with_capacity(batch);
    for i in 0..batch {
        let n = crate::numeric::norm(z.row(i));
        if n <= crate::numeric::ZERO_NORM_EPS {
            return Err(GcdError::ZeroVector { norm: n });
        }
        for v in unit.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    let weight = 1.0 / (batch * batch - batch) as f64;
    let mut loss = 0.0;
    let mut d_unit = Mat64::zeros(batch, z.cols());
    for i in 0..batch {
        for j in 0..batch {
            if i == j {
                continue;
            }
            let d_ij = 1.0 - dot(unit.row(i), unit.row(j));
            let (value, slope) = if pairs.get(i, j) {
                (d_ij, 1.0)
            } else {
                let margin = delta - d_ij;
                if hinge_clamp && margin <= 0.0 {
                    (0.0, 0.0)
                } else {
                    (margin, -1.0)
                }
            };
            loss += weight * value;
            if slope != 0.0 {
                // d d_ij / d unit_i = -unit_j and vice versa.
                let c = -weight * slope;
                for (g, &v) in d_unit.row_mut(i).iter_mut().zip(unit.row(j)) {
                    *g += c * v;
                }
                for (g, &v) in d_unit.row_mut(j).iter_mut().zip(unit.row(i)) {
                    *g += c * v;
                }
            }
        }
    }
    // Through the per-row normalization.
    let mut d_z = Mat64::zeros(batch, z.cols());
    for i in 0..batch {
        let along = dot(d_unit.row(i), unit.row(i));
        for ((g, &du), &u) in d_z.row_mut(i).iter_mut().zip(d_unit.row(i)).zip(unit.row(i)) {
            *g = (du - along * u) / norms[i];
        }
    }
    Ok((loss, d_z))
}

/// Gradients w.r.t. unit prototypes, sparse over classes.
pub type ProtoGrads = Vec<Option<Vec<f64>>>;

/// Cross-view prototypical contrastive loss. Anchors are classes present in
/// both views; the denominator runs over classes present in view B.
pub fn loss_context_cluster(
    protos_a: &PrototypeSet,
    protos_b: &PrototypeSet,
    tau: f64,
) -> Result<(f64, ProtoGrads, ProtoGrads)> {
    if tau <= 0.0 {
        return Err(GcdError::NonPositiveTemperature(tau));
    }
    if protos_a.k_total() != protos_b.k_total() || protos_a.dim() != protos_b.dim() {
        return Err(GcdError::ShapeMismatch {
            expected: format!("{} classes x {}", protos_a.k_total(), protos_a.dim()),
            got: format!("{} classes x {}", protos_b.k_total(), protos_b.dim()),
        });
    }
    let anchors: Vec<usize> = (0..protos_a.k_total())
        .filter(|&c| protos_a.present(c) && protos_b.present(c))
        .collect();
    if anchors.is_empty() {
        return Err(GcdError::NoCommonClasses);
    }
    let denominator: Vec<usize> = protos_b.present_classes();
    let inv_tau = 1.0 / tau;
    let anchor_weight = 1.0 / anchors.len() as f64;

    let dim = protos_a.dim();
    let mut d_a: ProtoGrads = vec![None; protos_a.k_total()];
    let mut d_b: ProtoGrads = vec![None; protos_b.k_total()];

    fn slot_mut(grads: &mut ProtoGrads, class: usize, dim: usize) -> &mut Vec<f64> {
        grads[class].get_or_insert_with(|| vec![0.0; dim])
    }

    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(denominator.len());
    for &i in &anchors {
        let mu_a = protos_a.proto(i).unwrap().to_vec();
        scores.clear();
        for &j in &denominator {
            scores.push(dot(&mu_a, protos_b.proto(j).unwrap()) * inv_tau);
        }
        let own = dot(&mu_a, protos_b.proto(i).unwrap()) * inv_tau;
        let (soft, lse) = softmax_lse(&scores);
        loss += (lse - own) * anchor_weight;

        // Positive part.
        let w = anchor_weight * inv_tau;
        {
            let g_a = slot_mut(&mut d_a, i, dim);
            for (g, &v) in g_a.iter_mut().zip(protos_b.proto(i).unwrap()) {
                *g -= w * v;
            }
        }
        {
            let g_b = slot_mut(&mut d_b, i, dim);
            for (g, &v) in g_b.iter_mut().zip(&mu_a) {
                *g -= w * v;
            }
        }
        // Denominator part.
        for (slot, &j) in denominator.iter().enumerate() {
            let a = soft[slot] * w;
            {
                let g_a = slot_mut(&mut d_a, i, dim);
                for (g, &v) in g_a.iter_mut().zip(protos_b.proto(j).unwrap()) {
                    *g += a * v;
                }
            }
            let g_b = slot_mut(&mut d_b, j, dim);
            for (g, &v) in g_b.iter_mut().zip(&mu_a) {
                *g += a * v;
            }
        }
    }
    Ok((loss, d_a, d_b))
}

/// Maps gradients on unit prototypes back to gradients on member embeddings
/// through `mu = S / |S|`, `S = sum of member rows`.
pub fn prototype_backward(set: &PrototypeSet, d_protos: &ProtoGrads, batch: usize, dim: usize) -> Mat64 {
    let mut d_z = Mat64::zeros(batch, dim);
    for class in 0..set.k_total() {
        let (Some(grad), Some(mu)) = (d_protos[class].as_ref(), set.proto(class)) else {
            continue;
        };
        let along = dot(grad, mu);
        let inv_norm = 1.0 / set.sum_norm(class);
        // dL/dS is identical for every member of the class.
        let d_sum: Vec<f64> = grad.iter().zip(mu).map(|(&g, &m)| (g - along * m) * inv_norm).collect();
        for &row in set.members(class) {
            for (g, &v) in d_z.row_mut(row).iter_mut().zip(&d_sum) {
                *g += v;
            }
        }
    }
    d_z
}

// ---------------------------------------------------------------------------
// Composite
// ---------------------------------------------------------------------------

/// Everything the composite objective consumes for one mini-batch step.
/// Teacher probabilities and the mined structures (pair labels, prototypes)
/// are constants of the step.
pub struct StepInputs<'a> {
    pub z_a: &'a Mat64,
    pub z_b: &'a Mat64,
    pub student_a: &'a Mat64,
    pub student_b: &'a Mat64,
    pub teacher_a: &'a Mat64,
    pub teacher_b: &'a Mat64,
    pub labels: &'a [i32],
    pub labeled_mask: &'a [bool],
    pub pairs: &'a PairLabels,
    pub protos_a: &'a PrototypeSet,
    pub protos_b: &'a PrototypeSet,
}

/// Gradients of the optimized scalar w.r.t. the step's tensor inputs.
pub struct StepGrads {
    pub d_z_a: Mat64,
    pub d_z_b: Mat64,
    pub d_student_logits_a: Mat64,
    pub d_student_logits_b: Mat64,
    pub d_teacher_logits_a: Option<Mat64>,
    pub d_teacher_logits_b: Option<Mat64>,
}

/// Composes the full objective. `apply_context` controls whether the
/// contextual terms contribute to the gradient (their values are always
/// evaluated and reported); the warmup protocol trains with it off.
pub fn loss_total(inputs: &StepInputs, cfg: &LossConfig, apply_context: bool) -> Result<(LossBreakdown, StepGrads)> {
    cfg.validate()?;
    let batch = inputs.z_a.rows();

    let (rep_u, mut d_z_a, mut d_z_b) = loss_rep_u(inputs.z_a, inputs.z_b, cfg.tau_u)?;
    let w_u = 1.0 - cfg.lambda;
    d_z_a.scale(w_u);
    d_z_b.scale(w_u);

    // Supervised representation term over the labeled subset; a batch with
    // no labeled rows simply contributes nothing.
    let labeled: Vec<usize> = (0..batch).filter(|&i| inputs.labeled_mask[i]).collect();
    let mut rep_s = 0.0;
    if !labeled.is_empty() {
        let za_l = inputs.z_a.select_rows(&labeled);
        let zb_l = inputs.z_b.select_rows(&labeled);
        let labels_l: Vec<i32> = labeled.iter().map(|&i| inputs.labels[i]).collect();
        let (value, d_a_l, d_b_l) = loss_rep_s(&za_l, &zb_l, &labels_l, cfg.tau_sup)?;
        rep_s = value;
        for (slot, &row) in labeled.iter().enumerate() {
            for (g, &v) in d_z_a.row_mut(row).iter_mut().zip(d_a_l.row(slot)) {
                *g += cfg.lambda * v;
            }
            for (g, &v) in d_z_b.row_mut(row).iter_mut().zip(d_b_l.row(slot)) {
                *g += cfg.lambda * v;
            }
        }
    }

    let cls = loss_cls(
        inputs.student_a,
        inputs.student_b,
        inputs.teacher_a,
        inputs.teacher_b,
        inputs.labels,
        inputs.labeled_mask,
        cfg.epsilon,
        cfg.lambda,
        cfg.detach_teacher,
    )?;

    // Instance-level context on view A; a singleton batch has no pairs.
    let mut l_n = 0.0;
    if batch >= 2 {
        let (value, d_ctx) = loss_context_instance(inputs.z_a, inputs.pairs, cfg.delta, cfg.hinge_clamp)?;
        l_n = value;
        if apply_context && cfg.lambda_n > 0.0 {
            for (g, &v) in d_z_a.data_mut().iter_mut().zip(d_ctx.data()) {
                *g += cfg.lambda_n * v;
            }
        }
    }

    // Cluster-level context across views; skipped when no class is present
    // in both views.
    let mut l_c = 0.0;
    match loss_context_cluster(inputs.protos_a, inputs.protos_b, cfg.tau_proto) {
        Ok((value, d_mu_a, d_mu_b)) => {
            l_c = value;
            if apply_context && cfg.lambda_c > 0.0 {
                let da = prototype_backward(inputs.protos_a, &d_mu_a, batch, inputs.z_a.cols());
                let db = prototype_backward(inputs.protos_b, &d_mu_b, batch, inputs.z_b.cols());
                for (g, &v) in d_z_a.data_mut().iter_mut().zip(da.data()) {
                    *g += cfg.lambda_c * v;
                }
                for (g, &v) in d_z_b.data_mut().iter_mut().zip(db.data()) {
                    *g += cfg.lambda_c * v;
                }
            }
        }
        Err(GcdError::NoCommonClasses) => {
            log::debug!("cluster-context term skipped: no class present in both views");
        }
        Err(e) => return Err(e),
    }

    let baseline = (1.0 - cfg.lambda) * (rep_u + cls.cls_u) + cfg.lambda * (rep_s + cls.cls_l);
    let total = baseline + cfg.lambda_n * l_n + cfg.lambda_c * l_c;
    let breakdown = LossBreakdown {
        rep_u,
        rep_s,
        cls_l: cls.cls_l,
        cls_u: cls.cls_u,
        entropy_term: cls.entropy_term,
        l_n,
        l_c,
        baseline,
        total,
    };
    Ok((
        breakdown,
        StepGrads {
            d_z_a,
            d_z_b,
            d_student_logits_a: cls.d_student_a,
            d_student_logits_b: cls.d_student_b,
            d_teacher_logits_a: cls.d_teacher_a,
            d_teacher_logits_b: cls.d_teacher_b,
        },
    ))
}
