use crate::microtensor::{Graph, ParamStore, Real, Tensor, TensorError, Var};

use super::geometry::{GeometryPlan, KERNEL_POINTS};

/// Two stacked group convolutions followed by interpolation back to every
/// input point. Output `[N, M, C]`.
pub fn spconv_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    plan: &GeometryPlan,
    channels: usize,
) -> Result<Var, TensorError> {
    let m = plan.group_order;
    let (n1, n2) = (plan.n1(), plan.n2());
    let s1 = g.constant(Tensor::from_f64(&[n1 * m, KERNEL_POINTS], &plan.layer1)?)?;
    let th1 = g.param(params, "spconv1.theta")?;
    let f1 = g.matmul(s1, th1)?;
    let f1 = g.relu(f1)?;

    let z = g.spmm(plan.layer2.clone(), f1)?;
    let z = g.reshape(z, &[n2 * m, KERNEL_POINTS * channels])?;
    let th2 = g.param(params, "spconv2.theta")?;
    let f2 = g.matmul(z, th2)?;
    let f2 = g.relu(f2)?;

    let f2 = g.reshape(f2, &[n2, m * channels])?;
    let f = g.spmm(plan.propagate.clone(), f2)?;
    g.reshape(f, &[plan.n_points, m, channels])
}

/// Mean over the group axis: `[N, M, C] -> [N, C]`.
pub fn group_pool<T: Real>(g: &mut Graph<T>, f: Var) -> Result<Var, TensorError> {
    g.mean(f, 1)
}

/// Mean over the group axis of part features: `[P, M, C] -> [P, C]`.
pub fn part_invariant<T: Real>(g: &mut Graph<T>, h: Var) -> Result<Var, TensorError> {
    g.mean(h, 1)
}

pub(crate) fn dense<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, x: Var, name: &str, relu: bool) -> Result<Var, TensorError> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    let y = g.add(y, b)?;
    if relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

/// Variance floor of the per-cloud feature standardization.
pub const SEG_NORM_EPS: f64 = 1e-5;

/// Point-wise classifier on invariant features with a max-pooled global
/// context concatenated back to every point. The features are first
/// standardized per channel over the cloud's points. Returns `(logits, alpha)`,
/// both `[N, P]`.
pub fn segment_parts<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, fbar: Var) -> Result<(Var, Var), TensorError> {
    let n = g.shape(fbar)[0];
    let fbar = g.standardize(fbar, 0, SEG_NORM_EPS)?;
    let h1 = dense(g, params, fbar, "seg.l1", true)?;
    let h2 = dense(g, params, h1, "seg.l2", true)?;
    let ctx = g.max(h2, 0)?;
    let width = g.shape(ctx)[0];
    let ctx = g.reshape(ctx, &[1, width])?;
    let ctx = g.gather_rows(ctx, &vec![0; n])?;
    let cat = g.concat(&[fbar, h1, ctx], 1)?;
    let h3 = dense(g, params, cat, "seg.l3", true)?;
    let logits = dense(g, params, h3, "seg.out", false)?;
    let alpha = g.softmax(logits, 1)?;
    Ok((logits, alpha))
}

/// `H[p, j, :] = Σ_i alpha[i, p] F[i, j, :]`: `[N, M, C] x [N, P] -> [P, M, C]`.
pub fn soft_aggregate<T: Real>(g: &mut Graph<T>, f: Var, alpha: Var) -> Result<Var, TensorError> {
    let (n, m, c) = match *g.shape(f) {
        [n, m, c] => (n, m, c),
        _ => return Err(TensorError::InvalidArgument("features must be [N, M, C]".into())),
    };
    let sa = g.shape(alpha).to_vec();
    if sa.len() != 2 || sa[0] != n {
        return Err(TensorError::ShapeMismatch { op: "soft_aggregate", lhs: vec![n, m, c], rhs: sa });
    }
    let flat = g.reshape(f, &[n, m * c])?;
    let at = g.transpose(alpha)?;
    let h = g.matmul(at, flat)?;
    g.reshape(h, &[sa[1], m, c])
}
