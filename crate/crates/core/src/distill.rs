//! Distillation losses: single-teacher matching distillation and weighted
//! multi-teacher recommendation distillation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{row_dot, RecModel};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Segment, Tensor, Var};

/// Temperatures and target-loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub t1: f64,
    pub t2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for KDConfig {
    fn default() -> Self {
        KDConfig {
            t1: 1.0,
            t2: 1.0,
            beta1: 1.0,
            beta2: 0.1,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t2 > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err(Error::Config("beta weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// How teacher soft labels are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Weighted sum of raw scores, then one tempered softmax.
    #[default]
    Logits,
    /// Weighted sum of each teacher's tempered distribution.
    Probabilities,
}

/// Loss nodes of one distillation step. `total = distill + emb + target`,
/// with `target` already multiplied by its beta.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub distill: Var,
    pub emb: Var,
    pub target: Var,
    pub total: Var,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {t}")))
    }
}

// T² · CE(softmax(target / T), student / T).
fn tempered_ce(g: &mut Graph<'_>, target_logits: Var, student: Var, t: f64) -> Result<Var> {
    let tt = g.scale(target_logits, 1.0 / t)?;
    let p = g.softmax(tt)?;
    let st = g.scale(student, 1.0 / t)?;
    let ce = g.cross_entropy(p, st)?;
    g.scale(ce, t * t)
}

/// `T² · CE(softmax(teacher/T), student/T)`, no gradient into the teacher.
pub fn soft_distill_loss(g: &mut Graph<'_>, teacher: Var, student: Var, t: f64) -> Result<Var> {
    check_temperature(t)?;
    let teacher = g.detach(teacher);
    tempered_ce(g, teacher, student, t)
}

/// `MSE(teacher titles, student titles) + MSE(teacher bodies, student bodies)`.
pub fn stage1_emb_loss(
    g: &mut Graph<'_>,
    teacher_titles: Var,
    teacher_bodies: Var,
    student_titles: Var,
    student_bodies: Var,
) -> Result<Var> {
    let t = g.mse(teacher_titles, student_titles)?;
    let b = g.mse(teacher_bodies, student_bodies)?;
    g.add(t, b)
}

/// Which distillation terms are active; disabled terms contribute 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSwitches {
    pub distill: bool,
    pub emb: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            distill: true,
            emb: true,
        }
    }
}

/// Teacher-side nodes of the matching task; values only, never trained.
#[derive(Debug, Clone, Copy)]
pub struct MatchTargets {
    pub logits: Var,
    pub titles: Var,
    pub bodies: Var,
}

/// Stage-1 objective: soft distillation + representation alignment +
/// `β1 ·` matching cross-entropy against `labels`.
pub fn stage1_total_loss(
    g: &mut Graph<'_>,
    kd: &KDConfig,
    switches: LossSwitches,
    teacher: MatchTargets,
    student: MatchTargets,
    labels: Var,
) -> Result<LossParts> {
    kd.validate()?;
    let distill = if switches.distill {
        soft_distill_loss(g, teacher.logits, student.logits, kd.t1)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let emb = if switches.emb {
        let (tt, tb) = (g.detach(teacher.titles), g.detach(teacher.bodies));
        stage1_emb_loss(g, tt, tb, student.titles, student.bodies)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let ce = g.cross_entropy(labels, student.logits)?;
    let target = g.scale(ce, kd.beta1)?;
    let total = sum3(g, distill, emb, target)?;
    Ok(LossParts {
        distill,
        emb,
        target,
        total,
    })
}

fn sum3(g: &mut Graph<'_>, a: Var, b: Var, c: Var) -> Result<Var> {
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// `softmax(−losses · ω)` for one sample.
pub fn teacher_weights(losses: &[f64], omega: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(1, losses.len(), losses.to_vec())?);
    let o = g.constant(Tensor::scalar(omega));
    let w = teacher_weights_node(&mut g, l, o)?;
    Ok(g.value(w).to_vec())
}

/// Row-wise `softmax(−losses · ω)` for a `[B, M]` loss block; differentiable
/// in `omega`.
pub fn teacher_weights_node(g: &mut Graph<'_>, losses: Var, omega: Var) -> Result<Var> {
    let shape = g.shape(losses).to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::invalid("teacher weights need at least one teacher"));
    }
    let s = g.scale_by(losses, omega)?;
    let s = g.neg(s)?;
    g.softmax(s)
}

/// Column `i` of a `[B, M]` node as `[B, 1]`.
fn column(g: &mut Graph<'_>, w: Var, i: usize) -> Result<Var> {
    let wt = g.transpose(w)?;
    let row = g.slice_rows(wt, i, 1)?;
    g.transpose(row)
}

/// Multiplies row `r` of `x` by `col[r]`.
fn scale_rows(g: &mut Graph<'_>, x: Var, col: Var) -> Result<Var> {
    let width = g.shape(x)[1];
    let ones = g.constant(Tensor::full(&[1, width], 1.0));
    let spread = g.matmul(col, ones)?;
    g.mul(x, spread)
}

/// Distillation from `M` teachers whose soft labels are merged with the
/// per-sample weights `w` (`[B, M]`). Gradient reaches `w` but not the
/// teacher scores.
pub fn stage2_distill_loss(
    g: &mut Graph<'_>,
    teacher_logits: &[Var],
    w: Var,
    student: Var,
    t: f64,
    mode: CombineMode,
) -> Result<Var> {
    check_temperature(t)?;
    let ws = g.shape(w).to_vec();
    if teacher_logits.is_empty() || ws.len() != 2 || ws[1] != teacher_logits.len() {
        return Err(Error::invalid(format!(
            "{} teachers but weight block {:?}",
            teacher_logits.len(),
            ws
        )));
    }
    let mut combined: Option<Var> = None;
    for (i, &tl) in teacher_logits.iter().enumerate() {
        let tl = g.detach(tl);
        let term = match mode {
            CombineMode::Logits => tl,
            CombineMode::Probabilities => {
                let s = g.scale(tl, 1.0 / t)?;
                g.softmax(s)?
            }
        };
        let wi = column(g, w, i)?;
        let term = scale_rows(g, term, wi)?;
        combined = Some(match combined {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let combined = combined.expect("at least one teacher");
    match mode {
        CombineMode::Logits => tempered_ce(g, combined, student, t),
        CombineMode::Probabilities => {
            let st = g.scale(student, 1.0 / t)?;
            let ce = g.cross_entropy(combined, st)?;
            g.scale(ce, t * t)
        }
    }
}

/// Affine map `rep · W + b` into the student's representation space.
pub fn project_teacher_rep(g: &mut Graph<'_>, w: Var, b: Var, rep: Var) -> Result<Var> {
    g.linear(rep, w, b)
}

/// Mean squared error of each segment's rows, as a `[segments, 1]` column.
fn segment_mse(g: &mut Graph<'_>, a: Var, b: Var, segs: &[Segment]) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let (rows, cols) = (g.shape(sq)[0], g.shape(sq)[1]);
    let ones = g.constant(Tensor::full(&[cols, 1], 1.0));
    let row_sums = g.matmul(sq, ones)?;
    let mut scale = vec![0.0; rows];
    for s in segs {
        for r in s.start..s.start + s.len {
            scale[r] = 1.0 / (s.len * cols) as f64;
        }
    }
    let scale = g.constant(Tensor::matrix(rows, 1, scale)?);
    g.segment_weighted_sum(scale, row_sums, segs)
}

/// Per-teacher projection parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub news_w: Var,
    pub news_b: Var,
    pub user_w: Var,
    pub user_b: Var,
}

/// Teacher-side representations of one batch.
#[derive(Debug, Clone, Copy)]
pub struct TeacherReprs {
    /// `[R, D_t]` news representations, rows grouped by `news_segments`.
    pub news: Var,
    /// `[B, D_t]` user vectors.
    pub users: Var,
}

/// `mean_b Σ_i w[b,i] · (MSE_b(proj_i(news_i), news_s) + MSE_b(proj_i(user_i), user_s))`
/// where `MSE_b` averages over the rows of sample `b` only.
pub fn stage2_emb_loss(
    g: &mut Graph<'_>,
    w: Var,
    teachers: &[TeacherReprs],
    projections: &[Projection],
    student_news: Var,
    student_users: Var,
    news_segments: &[Segment],
) -> Result<Var> {
    if teachers.len() != projections.len() || g.shape(w).get(1) != Some(&teachers.len()) {
        return Err(Error::invalid("teacher, projection and weight counts differ"));
    }
    let b = g.shape(student_users)[0];
    let user_segs: Vec<Segment> = (0..b).map(|i| Segment::new(i, 1)).collect();
    let mut acc: Option<Var> = None;
    for (i, (t, p)) in teachers.iter().zip(projections).enumerate() {
        let tn = g.detach(t.news);
        let tu = g.detach(t.users);
        let pn = project_teacher_rep(g, p.news_w, p.news_b, tn)?;
        let pu = project_teacher_rep(g, p.user_w, p.user_b, tu)?;
        let news = segment_mse(g, pn, student_news, news_segments)?;
        let user = segment_mse(g, pu, student_users, &user_segs)?;
        let both = g.add(news, user)?;
        let wi = column(g, w, i)?;
        let term = g.mul(both, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::invalid("no teachers"))?;
    g.mean(acc)
}

/// Stage-2 objective: weighted multi-teacher distillation + weighted
/// representation imitation + `β2 ·` click cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn stage2_total_loss(
    g: &mut Graph<'_>,
    kd: &KDConfig,
    switches: LossSwitches,
    mode: CombineMode,
    w: Var,
    teacher_logits: &[Var],
    teachers: &[TeacherReprs],
    projections: &[Projection],
    student_logits: Var,
    student_news: Var,
    student_users: Var,
    news_segments: &[Segment],
    labels: Var,
) -> Result<LossParts> {
    kd.validate()?;
    let distill = if switches.distill {
        stage2_distill_loss(g, teacher_logits, w, student_logits, kd.t2, mode)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let emb = if switches.emb {
        stage2_emb_loss(g, w, teachers, projections, student_news, student_users, news_segments)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let ce = g.cross_entropy(labels, student_logits)?;
    let target = g.scale(ce, kd.beta2)?;
    let total = sum3(g, distill, emb, target)?;
    Ok(LossParts {
        distill,
        emb,
        target,
        total,
    })
}

/// `ln(e^ω − 1)`: the pre-softplus value giving weight scale `ω`.
pub fn inverse_softplus(omega: f64) -> f64 {
    omega + (-(-omega).exp_m1()).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `M` frozen finetuned teachers plus the trainable projections into the
/// student space and the shared weight scale `ω = softplus(ρ)`.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    pub teachers: Vec<RecModel>,
    /// Four tensors per teacher: news W, news b, user W, user b.
    pub projections: ParamSet,
    /// The single scalar `ρ`.
    pub rho: ParamSet,
}

impl TeacherEnsemble {
    pub fn new<R: Rng>(teachers: Vec<RecModel>, student_dim: usize, omega: f64, rng: &mut R) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::invalid("teacher ensemble is empty"));
        }
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::Config(format!("initial omega must be positive, got {omega}")));
        }
        let mut projections = ParamSet::new();
        for (i, t) in teachers.iter().enumerate() {
            let d = t.cfg().repr_dim;
            let std = crate::encoders::INIT_STD;
            projections.push(format!("teacher{i}.news.w"), crate::encoders::normal_tensor(rng, &[d, student_dim], std));
            projections.push(format!("teacher{i}.news.b"), Tensor::zeros(&[student_dim]));
            projections.push(format!("teacher{i}.user.w"), crate::encoders::normal_tensor(rng, &[d, student_dim], std));
            projections.push(format!("teacher{i}.user.b"), Tensor::zeros(&[student_dim]));
        }
        let mut rho = ParamSet::new();
        rho.push("rho", Tensor::scalar(inverse_softplus(omega)));
        Ok(TeacherEnsemble {
            teachers,
            projections,
            rho,
        })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn omega(&self) -> f64 {
        softplus(self.rho.get(0).item())
    }

    /// Binds projections (group `proj_group`) and `ρ` (group `rho_group`);
    /// returns the projections and the `ω` node.
    pub fn bind<'p>(
        &'p self,
        g: &mut Graph<'p>,
        proj_group: Option<usize>,
        rho_group: Option<usize>,
    ) -> Result<(Vec<Projection>, Var)> {
        let p = self.projections.bind(g, proj_group, |_| true);
        let projections = p
            .chunks(4)
            .map(|c| Projection {
                news_w: c[0],
                news_b: c[1],
                user_w: c[2],
                user_b: c[3],
            })
            .collect();
        let rho = self.rho.bind(g, rho_group, |_| true)[0];
        let omega = g.softplus(rho)?;
        Ok((projections, omega))
    }
}

/// Per-sample cross-entropy of each teacher's scores against the click
/// labels, as a `[B, M]` block of constants.
pub fn per_teacher_losses(teacher_logits: &[Tensor], labels: &[usize]) -> Result<Tensor> {
    let m = teacher_logits.len();
    let b = labels.len();
    let mut out = vec![0.0; b * m];
    for (i, t) in teacher_logits.iter().enumerate() {
        if t.rows() != b {
            return Err(Error::invalid("teacher logits and labels disagree on batch size"));
        }
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            out[r * m + i] = crate::tensor::log_sum_exp(row) - row[y];
        }
    }
    Tensor::matrix(b, m, out)
}

/// `[B, K+1]` dot-product scores from candidate and user rows.
pub fn scores_from_reprs(g: &mut Graph<'_>, candidates: Var, users: Var, width: usize) -> Result<Var> {
    let b = g.shape(users)[0];
    let owner: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, width)).collect();
    let expanded = g.gather(users, &owner)?;
    let s = row_dot(g, candidates, expanded)?;
    g.reshape(s, &[b, width])
}
