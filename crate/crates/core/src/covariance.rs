//! Compiles a declarative covariance specification plus variance components
//! into concrete design matrices Z, random-effects covariance D(psi), batch
//! covariance V = g(Z) D g(Z)' + sig2e I and the per-parameter derivatives
//! of V needed by the likelihood gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SparseDesign};

/// How the random-effects design enters the covariance: raw, or through a
/// learned embedding table per categorical feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GMode {
    Identity,
    LearnedEmbedding { dim: usize },
}

/// Random-effects structure. Spatial locations are part of the declaration
/// since D(psi) is evaluated at the q fixed sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovKind {
    RandomIntercepts {
        q: usize,
    },
    MultipleCategorical {
        qs: Vec<usize>,
        nested: bool,
    },
    Longitudinal {
        q: usize,
        order: usize,
        /// Term-index pairs (l, m) with l < m whose random coefficients are
        /// correlated; each contributes one rho parameter.
        correlated_pairs: Vec<(usize, usize)>,
    },
    SpatialRbf {
        locations: Vec<[f64; 2]>,
    },
    Combined(Vec<CovKind>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub kind: CovKind,
    pub g_mode: GMode,
}

/// Per-observation random-effects information: one id column per categorical
/// or spatial feature (spatial ids index into the declared locations), and
/// measurement times for longitudinal structures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReDesignData {
    pub ids: Vec<Vec<usize>>,
    pub times: Option<Vec<f64>>,
}

impl ReDesignData {
    pub fn n_rows(&self) -> usize {
        self.ids.first().map_or(0, |c| c.len())
    }
}

/// The full variance-component vector: noise variance, psi variances in
/// canonical spec order, and correlations for declared longitudinal pairs.
/// The unconstrained optimizer-facing vector is [ln sig2e, ln psi.., atanh rho..].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sig2e: f64,
    pub psi: Vec<f64>,
    pub rhos: Vec<f64>,
}

impl VarianceComponents {
    pub fn new(sig2e: f64, psi: Vec<f64>, rhos: Vec<f64>) -> Self {
        VarianceComponents { sig2e, psi, rhos }
    }

    /// All variances 1.0, correlations 0.0.
    pub fn init_ones(spec: &CovarianceSpec) -> Self {
        VarianceComponents {
            sig2e: 1.0,
            psi: vec![1.0; spec.n_psi()],
            rhos: vec![0.0; spec.n_rho()],
        }
    }

    pub fn validate(&self, spec: &CovarianceSpec) -> Result<()> {
        if self.psi.len() != spec.n_psi() || self.rhos.len() != spec.n_rho() {
            return Err(Error::InvalidSpec(format!(
                "variance components count mismatch: got {} psi / {} rho, spec wants {} / {}",
                self.psi.len(),
                self.rhos.len(),
                spec.n_psi(),
                spec.n_rho()
            )));
        }
        if !(self.sig2e > 0.0 && self.sig2e.is_finite()) {
            return Err(Error::InvalidSpec("sig2e must be positive".into()));
        }
        if self.psi.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidSpec("psi entries must be >= 0".into()));
        }
        if self.rhos.iter().any(|r| r.abs() >= 1.0 || !r.is_finite()) {
            return Err(Error::InvalidSpec("correlations must lie in (-1, 1)".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        1 + self.psi.len() + self.rhos.len()
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.n_params());
        u.push(self.sig2e.ln());
        u.extend(self.psi.iter().map(|v| v.ln()));
        u.extend(self.rhos.iter().map(|r| r.atanh()));
        u
    }

    pub fn from_unconstrained(spec: &CovarianceSpec, u: &[f64]) -> Result<Self> {
        let (np, nr) = (spec.n_psi(), spec.n_rho());
        if u.len() != 1 + np + nr {
            return Err(Error::DimensionMismatch {
                context: "from_unconstrained",
                expected: 1 + np + nr,
                actual: u.len(),
            });
        }
        Ok(VarianceComponents {
            sig2e: u[0].exp(),
            psi: u[1..1 + np].iter().map(|v| v.exp()).collect(),
            rhos: u[1 + np..].iter().map(|v| v.tanh()).collect(),
        })
    }

    /// d(constrained)/d(unconstrained) per parameter, same ordering as
    /// `to_unconstrained`: sig2 for log-variances, 1 - rho^2 for atanh-rhos.
    pub fn chain_factors(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.n_params());
        f.push(self.sig2e);
        f.extend(self.psi.iter().copied());
        f.extend(self.rhos.iter().map(|r| 1.0 - r * r));
        f
    }

    /// Flat constrained vector [sig2e, psi.., rho..], matching `param_names`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.sig2e);
        v.extend(&self.psi);
        v.extend(&self.rhos);
        v
    }
}

/// The realized g(Z) for a row subset: the raw sparse design when g is the
/// identity, or the dense embedding outputs when g is learned.
#[derive(Debug, Clone)]
pub enum GzMatrix {
    Sparse(SparseDesign),
    Dense(DenseMatrix),
}

impl GzMatrix {
    pub fn rows(&self) -> usize {
        match self {
            GzMatrix::Sparse(z) => z.rows(),
            GzMatrix::Dense(g) => g.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            GzMatrix::Sparse(z) => z.cols(),
            GzMatrix::Dense(g) => g.cols(),
        }
    }

    /// y = g(Z)' x.
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        match self {
            GzMatrix::Sparse(z) => z.t_matvec(x),
            GzMatrix::Dense(g) => {
                let mut y = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    let row = g.row(i);
                    for (yc, &v) in y.iter_mut().zip(row) {
                        *yc += v * x[i];
                    }
                }
                y
            }
        }
    }

    /// y = g(Z) x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        match self {
            GzMatrix::Sparse(z) => z.matvec(x),
            GzMatrix::Dense(g) => g.matvec(x),
        }
    }
}

struct ComponentLayout<'a> {
    kind: &'a CovKind,
    psi_offset: usize,
    rho_offset: usize,
    col_offset: usize,
    n_cols: usize,
    id_offset: usize,
}

impl CovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        validate_kind(&self.kind, true)?;
        match self.g_mode {
            GMode::Identity => Ok(()),
            GMode::LearnedEmbedding { dim } => {
                if dim == 0 {
                    return Err(Error::InvalidSpec("embedding dim must be >= 1".into()));
                }
                match &self.kind {
                    CovKind::RandomIntercepts { .. } | CovKind::MultipleCategorical { .. } => {
                        Ok(())
                    }
                    _ => Err(Error::InvalidSpec(
                        "learned-embedding g is supported for categorical structures only".into(),
                    )),
                }
            }
        }
    }

    fn kinds(&self) -> Vec<&CovKind> {
        match &self.kind {
            CovKind::Combined(parts) => parts.iter().collect(),
            k => vec![k],
        }
    }

    fn components(&self) -> Vec<ComponentLayout<'_>> {
        let mut out = Vec::new();
        let (mut psi, mut rho, mut col, mut id) = (0, 0, 0, 0);
        for kind in self.kinds() {
            let n_cols = self.kind_cols(kind);
            out.push(ComponentLayout {
                kind,
                psi_offset: psi,
                rho_offset: rho,
                col_offset: col,
                n_cols,
                id_offset: id,
            });
            psi += kind_n_psi(kind);
            rho += kind_n_rho(kind);
            col += n_cols;
            id += kind_n_ids(kind);
        }
        out
    }

    fn kind_cols(&self, kind: &CovKind) -> usize {
        match (kind, self.g_mode) {
            (CovKind::RandomIntercepts { q }, GMode::Identity) => *q,
            (CovKind::RandomIntercepts { .. }, GMode::LearnedEmbedding { dim }) => dim,
            (CovKind::MultipleCategorical { qs, .. }, GMode::Identity) => qs.iter().sum(),
            (CovKind::MultipleCategorical { qs, .. }, GMode::LearnedEmbedding { dim }) => {
                qs.len() * dim
            }
            (CovKind::Longitudinal { q, order, .. }, _) => q * order,
            (CovKind::SpatialRbf { locations }, _) => locations.len(),
            (CovKind::Combined(_), _) => unreachable!("no nested Combined"),
        }
    }

    pub fn n_psi(&self) -> usize {
        self.kinds().iter().map(|k| kind_n_psi(k)).sum()
    }

    pub fn n_rho(&self) -> usize {
        self.kinds().iter().map(|k| kind_n_rho(k)).sum()
    }

    /// Total parameter count including sig2e.
    pub fn n_params(&self) -> usize {
        1 + self.n_psi() + self.n_rho()
    }

    /// Number of id columns `ReDesignData` must carry for this spec.
    pub fn n_id_features(&self) -> usize {
        self.kinds().iter().map(|k| kind_n_ids(k)).sum()
    }

    /// Dimension of D(psi), i.e. columns of g(Z).
    pub fn d_dim(&self) -> usize {
        self.components().iter().map(|c| c.n_cols).sum()
    }

    /// Stable parameter names for reports: sig2e first, then per-component
    /// variances and correlations. Combined specs prefix with f{idx}_.
    pub fn param_names(&self) -> Vec<String> {
        let combined = matches!(self.kind, CovKind::Combined(_));
        let mut names = vec!["sig2e".to_string()];
        let mut rho_names = Vec::new();
        for (ci, kind) in self.kinds().into_iter().enumerate() {
            let prefix = if combined {
                format!("f{ci}_")
            } else {
                String::new()
            };
            match kind {
                CovKind::RandomIntercepts { .. } => names.push(format!("{prefix}sig2b")),
                CovKind::MultipleCategorical { qs, .. } => {
                    for k in 0..qs.len() {
                        names.push(format!("{prefix}sig2b{k}"));
                    }
                }
                CovKind::Longitudinal {
                    order,
                    correlated_pairs,
                    ..
                } => {
                    for k in 0..*order {
                        names.push(format!("{prefix}sig2b{k}"));
                    }
                    for (l, m) in correlated_pairs {
                        rho_names.push(format!("{prefix}rho{l}{m}"));
                    }
                }
                CovKind::SpatialRbf { .. } => {
                    names.push(format!("{prefix}sig2b0"));
                    names.push(format!("{prefix}sig2b1"));
                }
                CovKind::Combined(_) => unreachable!(),
            }
        }
        names.extend(rho_names);
        names
    }
}

fn validate_kind(kind: &CovKind, allow_combined: bool) -> Result<()> {
    match kind {
        CovKind::RandomIntercepts { q } => {
            if *q == 0 {
                return Err(Error::InvalidSpec("q must be >= 1".into()));
            }
        }
        CovKind::MultipleCategorical { qs, .. } => {
            if qs.is_empty() || qs.iter().any(|q| *q == 0) {
                return Err(Error::InvalidSpec("all q values must be >= 1".into()));
            }
        }
        CovKind::Longitudinal {
            q,
            order,
            correlated_pairs,
        } => {
            if *q == 0 || *order == 0 {
                return Err(Error::InvalidSpec("q and order must be >= 1".into()));
            }
            for &(l, m) in correlated_pairs {
                if l >= m || m >= *order {
                    return Err(Error::InvalidSpec(format!(
                        "correlated pair ({l}, {m}) out of range for order {order}"
                    )));
                }
            }
        }
        CovKind::SpatialRbf { locations } => {
            if locations.is_empty() {
                return Err(Error::InvalidSpec("at least one location required".into()));
            }
            if locations.iter().any(|s| !s[0].is_finite() || !s[1].is_finite()) {
                return Err(Error::NonFinite("spatial locations"));
            }
        }
        CovKind::Combined(parts) => {
            if !allow_combined {
                return Err(Error::InvalidSpec("Combined may not nest Combined".into()));
            }
            if parts.is_empty() {
                return Err(Error::InvalidSpec("Combined needs components".into()));
            }
            for p in parts {
                validate_kind(p, false)?;
            }
        }
    }
    Ok(())
}

fn kind_n_psi(kind: &CovKind) -> usize {
    match kind {
        CovKind::RandomIntercepts { .. } => 1,
        CovKind::MultipleCategorical { qs, .. } => qs.len(),
        CovKind::Longitudinal { order, .. } => *order,
        CovKind::SpatialRbf { .. } => 2,
        CovKind::Combined(parts) => parts.iter().map(kind_n_psi).sum(),
    }
}

fn kind_n_rho(kind: &CovKind) -> usize {
    match kind {
        CovKind::Longitudinal {
            correlated_pairs, ..
        } => correlated_pairs.len(),
        CovKind::Combined(parts) => parts.iter().map(kind_n_rho).sum(),
        _ => 0,
    }
}

fn kind_n_ids(kind: &CovKind) -> usize {
    match kind {
        CovKind::MultipleCategorical { qs, .. } => qs.len(),
        CovKind::Combined(parts) => parts.iter().map(kind_n_ids).sum(),
        _ => 1,
    }
}

/// Build the raw sparse design Z for a row subset. At training time an
/// out-of-range id is an error; at test time it yields an all-zero entry for
/// that feature and the row index is flagged in the returned list.
pub fn build_z(
    spec: &CovarianceSpec,
    data: &ReDesignData,
    rows: &[usize],
    train: bool,
) -> Result<(SparseDesign, Vec<usize>)> {
    if data.ids.len() != spec.n_id_features() {
        return Err(Error::DimensionMismatch {
            context: "build_z id features",
            expected: spec.n_id_features(),
            actual: data.ids.len(),
        });
    }
    let mut z = SparseDesign::new(rows.len(), spec.d_dim());
    let mut unknown = Vec::new();
    for comp in spec.components() {
        match comp.kind {
            CovKind::RandomIntercepts { .. } | CovKind::SpatialRbf { .. } => {
                let q = match comp.kind {
                    CovKind::RandomIntercepts { q } => *q,
                    CovKind::SpatialRbf { locations } => locations.len(),
                    _ => unreachable!(),
                };
                let ids = &data.ids[comp.id_offset];
                for (local, &r) in rows.iter().enumerate() {
                    let id = ids[r];
                    if id < q {
                        z.push(local, comp.col_offset + id, 1.0);
                    } else if train {
                        return Err(Error::IdOutOfRange {
                            feature: comp.id_offset,
                            id,
                            max: q,
                        });
                    } else {
                        unknown.push(local);
                    }
                }
            }
            CovKind::MultipleCategorical { qs, .. } => {
                let mut col = comp.col_offset;
                for (k, &q) in qs.iter().enumerate() {
                    let ids = &data.ids[comp.id_offset + k];
                    for (local, &r) in rows.iter().enumerate() {
                        let id = ids[r];
                        if id < q {
                            z.push(local, col + id, 1.0);
                        } else if train {
                            return Err(Error::IdOutOfRange {
                                feature: comp.id_offset + k,
                                id,
                                max: q,
                            });
                        } else {
                            unknown.push(local);
                        }
                    }
                    col += q;
                }
            }
            CovKind::Longitudinal { q, order, .. } => {
                let ids = &data.ids[comp.id_offset];
                let times = data
                    .times
                    .as_ref()
                    .ok_or_else(|| Error::InvalidSpec("longitudinal spec requires times".into()))?;
                for (local, &r) in rows.iter().enumerate() {
                    let id = ids[r];
                    if id >= *q {
                        if train {
                            return Err(Error::IdOutOfRange {
                                feature: comp.id_offset,
                                id,
                                max: *q,
                            });
                        }
                        unknown.push(local);
                        continue;
                    }
                    let t = times[r];
                    if !t.is_finite() {
                        return Err(Error::NonFinite("longitudinal times"));
                    }
                    let mut tk = 1.0;
                    for k in 0..*order {
                        if tk != 0.0 {
                            z.push(local, comp.col_offset + k * q + id, tk);
                        }
                        tk *= t;
                    }
                }
            }
            CovKind::Combined(_) => unreachable!(),
        }
    }
    unknown.sort_unstable();
    unknown.dedup();
    Ok((z, unknown))
}

/// Squared-exponential kernel over 2-D sites: sig2b0 * exp(-|si - sj|^2 / (2 sig2b1)).
pub fn rbf_kernel(locations: &[[f64; 2]], sig2b0: f64, sig2b1: f64) -> Result<DenseMatrix> {
    if locations.iter().any(|s| !s[0].is_finite() || !s[1].is_finite()) {
        return Err(Error::NonFinite("rbf locations"));
    }
    if !(sig2b0 > 0.0) || !(sig2b1 > 0.0) {
        return Err(Error::InvalidSpec("rbf parameters must be positive".into()));
    }
    let q = locations.len();
    let mut k = DenseMatrix::zeros(q, q);
    for i in 0..q {
        *k.at_mut(i, i) = sig2b0;
        for j in (i + 1)..q {
            let dx = locations[i][0] - locations[j][0];
            let dy = locations[i][1] - locations[j][1];
            let v = sig2b0 * (-(dx * dx + dy * dy) / (2.0 * sig2b1)).exp();
            *k.at_mut(i, j) = v;
            *k.at_mut(j, i) = v;
        }
    }
    Ok(k)
}

/// Assemble D(psi) for the whole spec; block-diagonal across components.
pub fn build_d(spec: &CovarianceSpec, theta: &VarianceComponents) -> Result<DenseMatrix> {
    theta.validate(spec)?;
    let dim = spec.d_dim();
    let mut d = DenseMatrix::zeros(dim, dim);
    for comp in spec.components() {
        let psi = &theta.psi[comp.psi_offset..comp.psi_offset + kind_n_psi(comp.kind)];
        match comp.kind {
            CovKind::RandomIntercepts { .. } => {
                for j in 0..comp.n_cols {
                    *d.at_mut(comp.col_offset + j, comp.col_offset + j) = psi[0];
                }
            }
            CovKind::MultipleCategorical { qs, .. } => {
                let mut col = comp.col_offset;
                for (k, &q) in qs.iter().enumerate() {
                    let width = match spec.g_mode {
                        GMode::Identity => q,
                        GMode::LearnedEmbedding { dim } => dim,
                    };
                    for j in 0..width {
                        *d.at_mut(col + j, col + j) = psi[k];
                    }
                    col += width;
                }
            }
            CovKind::Longitudinal {
                q,
                order,
                correlated_pairs,
            } => {
                let rhos = &theta.rhos[comp.rho_offset..comp.rho_offset + correlated_pairs.len()];
                let c = longitudinal_term_cov(*order, psi, correlated_pairs, rhos)?;
                for l in 0..*order {
                    for m in 0..*order {
                        let v = c.at(l, m);
                        if v != 0.0 {
                            for j in 0..*q {
                                *d.at_mut(
                                    comp.col_offset + l * q + j,
                                    comp.col_offset + m * q + j,
                                ) = v;
                            }
                        }
                    }
                }
            }
            CovKind::SpatialRbf { locations } => {
                if psi[0] == 0.0 {
                    continue;
                }
                let k = rbf_kernel(locations, psi[0], psi[1].max(f64::MIN_POSITIVE))?;
                for i in 0..comp.n_cols {
                    for j in 0..comp.n_cols {
                        *d.at_mut(comp.col_offset + i, comp.col_offset + j) = k.at(i, j);
                    }
                }
            }
            CovKind::Combined(_) => unreachable!(),
        }
    }
    Ok(d)
}

/// K x K covariance of the longitudinal random terms. The correlation matrix
/// of the declared pairs is Cholesky-checked; violations are an error rather
/// than being projected back.
pub(crate) fn longitudinal_term_cov(
    order: usize,
    psi: &[f64],
    pairs: &[(usize, usize)],
    rhos: &[f64],
) -> Result<DenseMatrix> {
    let mut r = DenseMatrix::identity(order);
    for (&(l, m), &rho) in pairs.iter().zip(rhos) {
        *r.at_mut(l, m) = rho;
        *r.at_mut(m, l) = rho;
    }
    if !pairs.is_empty() && linalg::cholesky(&r).map(|f| f.jitter() > 0.0).unwrap_or(true) {
        return Err(Error::InvalidSpec(
            "longitudinal correlation matrix is not positive definite".into(),
        ));
    }
    let sig: Vec<f64> = psi.iter().map(|v| v.sqrt()).collect();
    let mut c = DenseMatrix::zeros(order, order);
    for l in 0..order {
        for m in 0..order {
            *c.at_mut(l, m) = r.at(l, m) * sig[l] * sig[m];
        }
    }
    Ok(c)
}

/// g(Z) * M * g(Z)' for a symmetric M of dimension d_dim.
fn sandwich(gz: &GzMatrix, m: &DenseMatrix) -> DenseMatrix {
    let n = gz.rows();
    match gz {
        GzMatrix::Sparse(z) => {
            // T = Z M, then V = T Z'.
            let mut t = DenseMatrix::zeros(n, m.cols());
            for i in 0..n {
                let t_row = t.row_mut(i);
                for &(c, v) in z.row(i) {
                    for (tv, &mv) in t_row.iter_mut().zip(m.row(c)) {
                        *tv += v * mv;
                    }
                }
            }
            let mut out = DenseMatrix::zeros(n, n);
            for i in 0..n {
                let t_row = t.row(i);
                for j in 0..n {
                    let s: f64 = z.row(j).iter().map(|&(c, v)| t_row[c] * v).sum();
                    *out.at_mut(i, j) = s;
                }
            }
            out
        }
        GzMatrix::Dense(g) => g.matmul(m).matmul_bt(g),
    }
}

/// Marginal covariance of a row subset: g(Z) D g(Z)' (+ sig2e I when `noise`).
pub fn marginal_v(
    spec: &CovarianceSpec,
    theta: &VarianceComponents,
    gz: &GzMatrix,
    noise: bool,
) -> Result<DenseMatrix> {
    if gz.cols() != spec.d_dim() {
        return Err(Error::DimensionMismatch {
            context: "marginal_v",
            expected: spec.d_dim(),
            actual: gz.cols(),
        });
    }
    let d = build_d(spec, theta)?;
    let mut v = sandwich(gz, &d);
    // Exact symmetry despite floating-point reassociation in the products.
    for i in 0..v.rows() {
        for j in (i + 1)..v.cols() {
            let s = 0.5 * (v.at(i, j) + v.at(j, i));
            *v.at_mut(i, j) = s;
            *v.at_mut(j, i) = s;
        }
    }
    if noise {
        v.add_diagonal(theta.sig2e);
    }
    Ok(v)
}

/// Derivative of V with respect to the `index`-th entry of the unconstrained
/// parameter vector (chain factor of the constraining bijection included).
pub fn dv_dtheta(
    spec: &CovarianceSpec,
    theta: &VarianceComponents,
    gz: &GzMatrix,
    index: usize,
) -> Result<DenseMatrix> {
    let n_params = spec.n_params();
    if index >= n_params {
        return Err(Error::ParamIndexOutOfRange {
            index,
            len: n_params,
        });
    }
    let n = gz.rows();
    if index == 0 {
        // dV/d(ln sig2e) = sig2e * I.
        let mut m = DenseMatrix::zeros(n, n);
        m.add_diagonal(theta.sig2e);
        return Ok(m);
    }
    let structural = structural_d_derivative(spec, theta, index)?;
    let mut dv = sandwich(gz, &structural);
    let chain = theta.chain_factors()[index];
    for v in dv.data_mut().iter_mut() {
        *v *= chain;
    }
    Ok(dv)
}

/// dD/d(constrained parameter) for psi and rho entries, assembled on the full
/// d_dim x d_dim layout.
fn structural_d_derivative(
    spec: &CovarianceSpec,
    theta: &VarianceComponents,
    index: usize,
) -> Result<DenseMatrix> {
    let dim = spec.d_dim();
    let n_psi = spec.n_psi();
    let mut dd = DenseMatrix::zeros(dim, dim);
    let flat = index - 1;
    for comp in spec.components() {
        let comp_n_psi = kind_n_psi(comp.kind);
        let comp_n_rho = kind_n_rho(comp.kind);
        if flat < n_psi {
            // A variance parameter.
            if flat < comp.psi_offset || flat >= comp.psi_offset + comp_n_psi {
                continue;
            }
            let local = flat - comp.psi_offset;
            let psi = &theta.psi[comp.psi_offset..comp.psi_offset + comp_n_psi];
            match comp.kind {
                CovKind::RandomIntercepts { .. } => {
                    for j in 0..comp.n_cols {
                        *dd.at_mut(comp.col_offset + j, comp.col_offset + j) = 1.0;
                    }
                }
                CovKind::MultipleCategorical { qs, .. } => {
                    let mut col = comp.col_offset;
                    for (k, &q) in qs.iter().enumerate() {
                        let width = match spec.g_mode {
                            GMode::Identity => q,
                            GMode::LearnedEmbedding { dim } => dim,
                        };
                        if k == local {
                            for j in 0..width {
                                *dd.at_mut(col + j, col + j) = 1.0;
                            }
                        }
                        col += width;
                    }
                }
                CovKind::Longitudinal {
                    q,
                    correlated_pairs,
                    ..
                } => {
                    let rhos =
                        &theta.rhos[comp.rho_offset..comp.rho_offset + correlated_pairs.len()];
                    let sig: Vec<f64> = psi.iter().map(|v| v.sqrt()).collect();
                    // d C_ll / d psi_l = 1; d C_lm / d psi_l = rho_lm sig_m / (2 sig_l).
                    let l = local;
                    for j in 0..*q {
                        *dd.at_mut(comp.col_offset + l * q + j, comp.col_offset + l * q + j) = 1.0;
                    }
                    for (&(a, b), &rho) in correlated_pairs.iter().zip(rhos) {
                        let other = if a == l {
                            b
                        } else if b == l {
                            a
                        } else {
                            continue;
                        };
                        let v = rho * sig[other] / (2.0 * sig[l]);
                        for j in 0..*q {
                            *dd.at_mut(
                                comp.col_offset + l * q + j,
                                comp.col_offset + other * q + j,
                            ) = v;
                            *dd.at_mut(
                                comp.col_offset + other * q + j,
                                comp.col_offset + l * q + j,
                            ) = v;
                        }
                    }
                }
                CovKind::SpatialRbf { locations } => {
                    let (s0, s1) = (psi[0], psi[1]);
                    let k = rbf_kernel(locations, s0, s1)?;
                    for i in 0..comp.n_cols {
                        for j in 0..comp.n_cols {
                            let v = if local == 0 {
                                // D = s0 * E, so dD/ds0 = D / s0.
                                k.at(i, j) / s0
                            } else {
                                // dD_ij/ds1 = D_ij * h^2 / (2 s1^2).
                                let dx = locations[i][0] - locations[j][0];
                                let dy = locations[i][1] - locations[j][1];
                                k.at(i, j) * (dx * dx + dy * dy) / (2.0 * s1 * s1)
                            };
                            if v != 0.0 {
                                *dd.at_mut(comp.col_offset + i, comp.col_offset + j) = v;
                            }
                        }
                    }
                }
                CovKind::Combined(_) => unreachable!(),
            }
            return Ok(dd);
        } else {
            // A correlation parameter.
            let rho_index = flat - n_psi;
            if rho_index < comp.rho_offset || rho_index >= comp.rho_offset + comp_n_rho {
                continue;
            }
            if let CovKind::Longitudinal {
                q,
                correlated_pairs,
                ..
            } = comp.kind
            {
                let local = rho_index - comp.rho_offset;
                let (l, m) = correlated_pairs[local];
                let psi = &theta.psi[comp.psi_offset..comp.psi_offset + comp_n_psi];
                let v = psi[l].sqrt() * psi[m].sqrt();
                for j in 0..*q {
                    *dd.at_mut(comp.col_offset + l * q + j, comp.col_offset + m * q + j) = v;
                    *dd.at_mut(comp.col_offset + m * q + j, comp.col_offset + l * q + j) = v;
                }
            }
            return Ok(dd);
        }
    }
    Err(Error::ParamIndexOutOfRange {
        index,
        len: spec.n_params(),
    })
}

/// Block partition of V for sorted data, when the structure admits one:
/// random intercepts and longitudinal data sorted by the (single) id column,
/// and nested multiple categoricals sorted by the top-level feature. Returns
/// per-block row counts, or None.
pub fn is_block_diagonal(spec: &CovarianceSpec, data: &ReDesignData) -> Option<Vec<usize>> {
    if !matches!(spec.g_mode, GMode::Identity) {
        return None;
    }
    let primary = match &spec.kind {
        CovKind::RandomIntercepts { .. } | CovKind::Longitudinal { .. } => &data.ids[0],
        CovKind::MultipleCategorical { qs, nested } => {
            if qs.len() == 1 {
                &data.ids[0]
            } else if !nested {
                return None;
            } else {
                // Every lower-level id must map to a single top-level id.
                for k in 1..qs.len() {
                    let mut seen: Vec<Option<usize>> = vec![None; qs[k]];
                    for (&top, &low) in data.ids[0].iter().zip(&data.ids[k]) {
                        match seen.get(low).copied().flatten() {
                            None => {
                                if low < seen.len() {
                                    seen[low] = Some(top);
                                }
                            }
                            Some(t) if t == top => {}
                            Some(_) => return None,
                        }
                    }
                }
                &data.ids[0]
            }
        }
        _ => return None,
    };
    if primary.is_empty() {
        return Some(Vec::new());
    }
    if primary.windows(2).any(|w| w[0] > w[1]) {
        return None;
    }
    let mut blocks = Vec::new();
    let mut run = 1usize;
    for w in primary.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            blocks.push(run);
            run = 1;
        }
    }
    blocks.push(run);
    Some(blocks)
}
