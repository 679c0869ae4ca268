//! Sliding-window factor-graph solver: state bookkeeping, Levenberg-Marquardt
//! on the manifold and Schur-complement marginalization.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factors::{Factor, StateView, VarKey};
use crate::quadric::QuadricParams;
use crate::se3::{se3_log, Pose, Twist};

/// Value of one state variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateValue {
    Pose(Pose),
    Point(Vector3<f64>),
    Quadric(QuadricParams),
}

impl StateValue {
    pub fn dim(&self) -> usize {
        match self {
            StateValue::Pose(_) => 6,
            StateValue::Point(_) => 3,
            StateValue::Quadric(_) => 9,
        }
    }

    pub fn retract(&self, d: &[f64]) -> StateValue {
        match self {
            StateValue::Pose(p) => {
                StateValue::Pose(p.retract(&Twist::from_vector(&SVector::from_column_slice(d))))
            }
            StateValue::Point(x) => StateValue::Point(x + Vector3::from_column_slice(d)),
            StateValue::Quadric(q) => {
                StateValue::Quadric(q.retract(&SVector::from_column_slice(d)))
            }
        }
    }

    /// Increment taking `self` to `other`.
    pub fn local(&self, other: &StateValue) -> Result<DVector<f64>> {
        Ok(match (self, other) {
            (StateValue::Pose(a), StateValue::Pose(b)) => {
                DVector::from_column_slice(se3_log(&a.inverse().compose(b))?.to_vector().as_slice())
            }
            (StateValue::Point(a), StateValue::Point(b)) => {
                DVector::from_column_slice((b - a).as_slice())
            }
            (StateValue::Quadric(a), StateValue::Quadric(b)) => {
                DVector::from_column_slice(a.local(b)?.as_slice())
            }
            _ => return Err(Error::DanglingFactor("state kind changed".into())),
        })
    }
}

/// Gaussian prior left by marginalization, kept in square-root form:
/// cost `‖J (x ⊟ x₀) + r₀‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub keys: Vec<VarKey>,
    /// Linearization point.
    pub point: Vec<StateValue>,
    pub information: DMatrix<f64>,
    /// Gradient `Jᵀr` at the linearization point.
    pub information_vector: DVector<f64>,
    sqrt_information: DMatrix<f64>,
    r0: DVector<f64>,
}

impl GaussianPrior {
    pub fn new(
        keys: Vec<VarKey>,
        point: Vec<StateValue>,
        information: DMatrix<f64>,
        info_vec: DVector<f64>,
    ) -> Self {
        let n = information.nrows();
        let mut sym = (&information + information.transpose()) * 0.5;
        let jitter = 1e-12 * sym.diagonal().amax().max(1e-300);
        for i in 0..n {
            sym[(i, i)] += jitter;
        }
        // H = L Lᵀ gives J = Lᵀ and r₀ = L⁻¹ g; eigen-clipping only when H is indefinite
        let (sqrt_information, r0, information) = match cholesky_lower(&sym) {
            Some(l) => {
                let r0 = l
                    .solve_lower_triangular(&info_vec)
                    .unwrap_or_else(|| DVector::zeros(n));
                (l.transpose(), r0, sym)
            }
            None => {
                let eig = sym.symmetric_eigen();
                let max = eig.eigenvalues.amax().max(1e-300);
                let mut rows = Vec::new();
                let mut r0 = Vec::new();
                for i in 0..n {
                    let l = eig.eigenvalues[i];
                    if l > 1e-12 * max {
                        let u = eig.eigenvectors.column(i);
                        rows.push((u * l.sqrt()).transpose());
                        r0.push(u.dot(&info_vec) / l.sqrt());
                    }
                }
                let j = if rows.is_empty() {
                    DMatrix::zeros(0, n)
                } else {
                    DMatrix::from_rows(&rows)
                };
                let information = j.transpose() * &j;
                (j, DVector::from_vec(r0), information)
            }
        };
        Self {
            keys,
            point,
            information: (&information + information.transpose()) * 0.5,
            information_vector: info_vec,
            sqrt_information,
            r0,
        }
    }

    /// True when every eigenvalue of the information exceeds `-tol`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let mut m = self.information.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += tol;
        }
        m.cholesky().is_some()
    }

    pub fn dim(&self) -> usize {
        self.information.nrows()
    }

    fn delta(&self, s: &WindowState) -> Result<DVector<f64>> {
        let mut d = DVector::zeros(self.dim());
        let mut off = 0;
        for (k, x0) in self.keys.iter().zip(&self.point) {
            let x = s
                .value(k)
                .ok_or_else(|| Error::DanglingFactor(format!("{k:?}")))?;
            let l = x0.local(&x)?;
            d.rows_mut(off, l.len()).copy_from(&l);
            off += l.len();
        }
        Ok(d)
    }

    /// Residual and Jacobian (identity chain rule for the local difference).
    pub fn linearize(&self, s: &WindowState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.delta(s)?;
        Ok((
            &self.sqrt_information * d + &self.r0,
            self.sqrt_information.clone(),
        ))
    }

    /// Residual and gradient `Jᵀr` at the current state.
    fn residual_gradient(&self, s: &WindowState) -> Result<(DVector<f64>, DVector<f64>)> {
        let r = &self.sqrt_information * self.delta(s)? + &self.r0;
        let g = self.sqrt_information.tr_mul(&r);
        Ok((r, g))
    }

    pub fn cost(&self, s: &WindowState) -> Result<f64> {
        Ok((&self.sqrt_information * self.delta(s)? + &self.r0).norm_squared())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.information.clone().symmetric_eigen().eigenvalues.min()
    }
}

/// States and factors of one new frame.
#[derive(Debug, Clone, Default)]
pub struct FrameInsert {
    pub frame: u64,
    /// New states; keys already present keep their current value.
    pub states: Vec<(VarKey, StateValue)>,
    pub factors: Vec<Factor>,
}

#[derive(Debug, Clone)]
pub struct WindowState {
    pub frames: Vec<u64>,
    pub values: BTreeMap<VarKey, StateValue>,
    pub factors: Vec<Factor>,
    pub prior: Option<GaussianPrior>,
    pub capacity: usize,
}

impl StateView for WindowState {
    fn pose(&self, key: &VarKey) -> Option<&Pose> {
        match self.values.get(key) {
            Some(StateValue::Pose(p)) => Some(p),
            _ => None,
        }
    }
    fn point(&self, key: &VarKey) -> Option<&Vector3<f64>> {
        match self.values.get(key) {
            Some(StateValue::Point(p)) => Some(p),
            _ => None,
        }
    }
    fn quadric(&self, key: &VarKey) -> Option<&QuadricParams> {
        match self.values.get(key) {
            Some(StateValue::Quadric(q)) => Some(q),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iters: usize,
    pub lambda0: f64,
    pub min_step: f64,
    pub min_relative_decrease: f64,
    /// Points are Schur-eliminated when more than this many are present.
    pub schur_threshold: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            lambda0: 1e-3,
            min_step: 1e-8,
            min_relative_decrease: 1e-9,
            schur_threshold: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmReport {
    pub iterations: usize,
    pub accepted: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

impl WindowState {
    pub fn new(capacity: usize) -> Self {
        Self {
            frames: Vec::new(),
            values: BTreeMap::new(),
            factors: Vec::new(),
            prior: None,
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn value(&self, key: &VarKey) -> Option<StateValue> {
        self.values.get(key).copied()
    }

    fn oldest_frame_keys(&self) -> BTreeSet<VarKey> {
        match self.frames.first() {
            Some(&f) => self
                .values
                .keys()
                .filter(|k| k.frame() == Some(f))
                .copied()
                .collect(),
            None => BTreeSet::new(),
        }
    }

    /// Inserts a frame, marginalizing the oldest one first when full.
    pub fn add_frame(&mut self, insert: FrameInsert) -> Result<()> {
        if let Some(&last) = self.frames.last() {
            if insert.frame <= last {
                return Err(Error::NonMonotoneFrameId {
                    last,
                    got: insert.frame,
                });
            }
        }
        let leaving = if self.frames.len() >= self.capacity {
            self.oldest_frame_keys()
        } else {
            BTreeSet::new()
        };
        let new_keys: BTreeSet<VarKey> = insert.states.iter().map(|s| s.0).collect();
        for f in &insert.factors {
            for k in &f.keys {
                let live =
                    (self.values.contains_key(k) && !leaving.contains(k)) || new_keys.contains(k);
                if !live {
                    return Err(Error::DanglingFactor(format!("{k:?}")));
                }
            }
        }
        if self.frames.len() >= self.capacity {
            self.marginalize_oldest()?;
        }
        for (k, v) in insert.states {
            self.values.entry(k).or_insert(v);
        }
        self.factors.extend(insert.factors);
        self.frames.push(insert.frame);
        Ok(())
    }

    /// Removes the oldest frame, folding its information into the prior.
    pub fn marginalize_oldest(&mut self) -> Result<()> {
        if self.frames.len() < self.capacity || self.frames.is_empty() {
            return Ok(());
        }
        let m = self.oldest_frame_keys();
        let prior_keys: BTreeSet<VarKey> = self
            .prior
            .iter()
            .flat_map(|p| p.keys.iter().copied())
            .collect();

        // non-frame states whose every factor touches the leaving frame go with it
        let mut touches_other: BTreeSet<VarKey> = BTreeSet::new();
        let mut referenced: BTreeSet<VarKey> = BTreeSet::new();
        for f in &self.factors {
            let hits_m = f.keys.iter().any(|k| m.contains(k));
            for k in &f.keys {
                referenced.insert(*k);
                if !hits_m {
                    touches_other.insert(*k);
                }
            }
        }
        let dropped: BTreeSet<VarKey> = referenced
            .iter()
            .filter(|k| {
                k.frame().is_none() && !touches_other.contains(k) && !prior_keys.contains(k)
            })
            .copied()
            .collect();
        // states held only by the prior and the leaving frame are marginalized too
        let mut m = m;
        m.extend(
            prior_keys
                .iter()
                .filter(|k| k.frame().is_none() && !touches_other.contains(k)),
        );

        let (leaving, staying): (Vec<Factor>, Vec<Factor>) = std::mem::take(&mut self.factors)
            .into_iter()
            .partition(|f| f.keys.iter().any(|k| m.contains(k) || dropped.contains(k)));
        self.factors = staying;
        let marg_factors: Vec<&Factor> = leaving
            .iter()
            .filter(|f| !f.keys.iter().any(|k| dropped.contains(k)))
            .collect();

        let mut survivors: BTreeSet<VarKey> = BTreeSet::new();
        for f in &marg_factors {
            survivors.extend(f.keys.iter().filter(|k| !m.contains(k)));
        }
        let prior_touches_m = prior_keys.iter().any(|k| m.contains(k));
        if survivors.is_empty() && !prior_touches_m {
            // nothing links the leaving frame to the rest
            self.remove_states(&m, &dropped);
            return Ok(());
        }
        survivors.extend(prior_keys.iter().filter(|k| !m.contains(k)));

        let m_keys: Vec<VarKey> = m.iter().copied().collect();
        let s_keys: Vec<VarKey> = survivors.iter().copied().collect();
        let mut order = m_keys.clone();
        order.extend(&s_keys);
        let layout = Layout::dense(&order, &self.values);
        let mut sys = System::new(&layout);
        for f in &marg_factors {
            if let Ok(lin) = f.linearize(self) {
                sys.add_factor(&layout, &f.keys, &lin.residual, &lin.jacobians);
            }
        }
        if let Some(p) = &self.prior {
            let (_, g) = p.residual_gradient(self)?;
            sys.add_prior(&layout, p, &g);
        }
        let nm: usize = m_keys.iter().map(|k| k.dim()).sum();
        let h = &sys.hcc;
        let g = &sys.gc;
        let n = h.nrows();
        let ns = n - nm;
        let hmm = h.view((0, 0), (nm, nm)).into_owned();
        let hms = h.view((0, nm), (nm, ns)).into_owned();
        let hss = h.view((nm, nm), (ns, ns)).into_owned();
        let gm = g.rows(0, nm).into_owned();
        let gs = g.rows(nm, ns).into_owned();
        let hmm_pinv = pseudo_inverse(&hmm);
        let info = hss - hms.transpose() * &hmm_pinv * &hms;
        let info_vec = gs - hms.transpose() * &hmm_pinv * gm;
        let point: Vec<StateValue> = s_keys.iter().map(|k| self.values[k]).collect();
        self.prior = Some(GaussianPrior::new(s_keys, point, info, info_vec));
        self.remove_states(&m, &dropped);
        Ok(())
    }

    fn remove_states(&mut self, m: &BTreeSet<VarKey>, dropped: &BTreeSet<VarKey>) {
        for k in m.iter().chain(dropped) {
            self.values.remove(k);
        }
        // unreferenced non-frame states
        let mut used: BTreeSet<VarKey> = self
            .factors
            .iter()
            .flat_map(|f| f.keys.iter().copied())
            .collect();
        if let Some(p) = &self.prior {
            used.extend(p.keys.iter().copied());
        }
        self.values
            .retain(|k, _| k.frame().is_some() || used.contains(k));
        self.frames.remove(0);
    }

    /// Total robust cost of the factors in `active` plus the prior.
    fn cost_of(&self, active: &[usize]) -> Result<f64> {
        let costs: Vec<Result<f64>> = active
            .par_iter()
            .map(|&i| self.factors[i].cost(self))
            .collect();
        let mut total = 0.0;
        for c in costs {
            total += c?;
        }
        if let Some(p) = &self.prior {
            total += p.cost(self)?;
        }
        Ok(total)
    }

    /// Total cost with degenerate factors skipped.
    pub fn total_cost(&self) -> f64 {
        let active = self.active_factors();
        self.cost_of(&active).unwrap_or(f64::INFINITY)
    }

    fn active_factors(&self) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&i| self.factors[i].cost(self).is_ok_and(f64::is_finite))
            .collect()
    }

    fn retract_all(&self, layout: &Layout, dx: &DVector<f64>) -> BTreeMap<VarKey, StateValue> {
        let mut out = self.values.clone();
        for (k, off) in &layout.offset {
            let v = &self.values[k];
            out.insert(*k, v.retract(dx.rows(*off, v.dim()).as_slice()));
        }
        out
    }

    /// Levenberg-Marquardt over every state in the window.
    pub fn lm_solve(&mut self, cfg: &LmConfig) -> Result<LmReport> {
        if self.factors.is_empty() && self.prior.is_none() {
            return Err(Error::NoFactors);
        }
        let mut active = self.active_factors();
        let initial_cost = self.cost_of(&active)?;
        let mut cost = initial_cost;
        let mut lambda = cfg.lambda0;
        let mut iterations = 0;
        let mut accepted = 0;
        let prior_keys: BTreeSet<VarKey> = self
            .prior
            .iter()
            .flat_map(|p| p.keys.iter().copied())
            .collect();
        let layout = Layout::new(&self.values, &prior_keys, cfg.schur_threshold);

        'outer: while iterations < cfg.max_iters {
            iterations += 1;
            let mut sys = System::new(&layout);
            let lins: Vec<_> = active
                .par_iter()
                .map(|&i| self.factors[i].linearize(self))
                .collect();
            for (lin, &i) in lins.into_iter().zip(&active) {
                let lin = lin?;
                sys.add_factor(
                    &layout,
                    &self.factors[i].keys,
                    &lin.residual,
                    &lin.jacobians,
                );
            }
            if let Some(p) = &self.prior {
                let (_, g) = p.residual_gradient(self)?;
                sys.add_prior(&layout, p, &g);
            }
            loop {
                let Some(dx) = sys.solve(lambda) else {
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        if accepted == 0 {
                            return Err(Error::SingularSystem);
                        }
                        break 'outer;
                    }
                    continue;
                };
                if dx.norm() < cfg.min_step {
                    break 'outer;
                }
                let candidate = self.retract_all(&layout, &dx);
                let old = std::mem::replace(&mut self.values, candidate);
                let new_cost = self.cost_of(&active).unwrap_or(f64::INFINITY);
                if new_cost.is_finite() && new_cost < cost {
                    accepted += 1;
                    lambda = (lambda / 10.0).max(1e-12);
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    cost = new_cost;
                    if rel < cfg.min_relative_decrease {
                        break 'outer;
                    }
                    break;
                }
                self.values = old;
                lambda *= 10.0;
                if lambda > 1e12 {
                    break 'outer;
                }
            }
            // factors that became valid or invalid at the new estimate
            let now = self.active_factors();
            if now != active {
                active = now;
                cost = self.cost_of(&active)?;
            }
        }
        Ok(LmReport {
            iterations,
            accepted,
            initial_cost,
            final_cost: cost,
        })
    }
}

/// Lower Cholesky factor computed from the lower triangle of `a`.
/// Runs single-threaded so results do not depend on scheduling.
fn faer_llt(a: &DMatrix<f64>) -> Option<faer::Mat<f64>> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::cholesky::llt;
    let n = a.nrows();
    let par = faer::Par::Seq;
    let mut l = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    let mut buf = MemBuffer::new(llt::factor::cholesky_in_place_scratch::<f64>(
        n,
        par,
        Default::default(),
    ));
    llt::factor::cholesky_in_place(
        l.as_mut(),
        Default::default(),
        par,
        MemStack::new(&mut buf),
        Default::default(),
    )
    .ok()?;
    Some(l)
}

fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let l = faer_llt(a)?;
    Some(DMatrix::from_fn(a.nrows(), a.nrows(), |i, j| {
        if i >= j {
            l[(i, j)]
        } else {
            0.0
        }
    }))
}

/// Dense Cholesky solve of `a x = b`.
fn cholesky_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::cholesky::llt;
    let n = a.nrows();
    let par = faer::Par::Seq;
    let l = faer_llt(a)?;
    let mut x = faer::Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    let mut buf = MemBuffer::new(llt::solve::solve_in_place_scratch::<f64>(n, 1, par));
    llt::solve::solve_in_place(l.as_ref(), x.as_mut(), par, MemStack::new(&mut buf));
    Some(DVector::from_fn(n, |i, _| x[(i, 0)]))
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let l = eig.eigenvalues[i];
        if l > 1e-10 * max.max(1e-300) {
            let u = eig.eigenvectors.column(i);
            out += u * u.transpose() / l;
        }
    }
    out
}

/// Variable ordering: dense block first, then points eliminated by Schur.
struct Layout {
    offset: BTreeMap<VarKey, usize>,
    dense_dim: usize,
    /// Eliminated points and their offsets within the point block.
    points: BTreeMap<VarKey, usize>,
}

impl Layout {
    fn new(
        values: &BTreeMap<VarKey, StateValue>,
        keep_dense: &BTreeSet<VarKey>,
        threshold: usize,
    ) -> Self {
        let eliminable: Vec<VarKey> = values
            .keys()
            .filter(|k| k.is_point() && !keep_dense.contains(k))
            .copied()
            .collect();
        let schur = eliminable.len() > threshold;
        let mut offset = BTreeMap::new();
        let mut dim = 0;
        for (k, v) in values {
            if schur && k.is_point() && !keep_dense.contains(k) {
                continue;
            }
            offset.insert(*k, dim);
            dim += v.dim();
        }
        let mut points = BTreeMap::new();
        if schur {
            for (i, k) in eliminable.iter().enumerate() {
                points.insert(*k, 3 * i);
            }
        }
        // the retraction walks `offset`; points get offsets past the dense block
        let mut all = offset.clone();
        for (k, o) in &points {
            all.insert(*k, dim + o);
        }
        Self {
            offset: all,
            dense_dim: dim,
            points,
        }
    }

    fn dense(order: &[VarKey], values: &BTreeMap<VarKey, StateValue>) -> Self {
        let mut offset = BTreeMap::new();
        let mut dim = 0;
        for k in order {
            offset.insert(*k, dim);
            dim += values[k].dim();
        }
        Self {
            offset,
            dense_dim: dim,
            points: BTreeMap::new(),
        }
    }
}

/// Normal equations split as `[A B; Bᵀ C]` with `C` block-diagonal over points.
struct System {
    hcc: DMatrix<f64>,
    hcp: DMatrix<f64>,
    hpp: Vec<Matrix3<f64>>,
    gc: DVector<f64>,
    gp: DVector<f64>,
}

enum Slot {
    Dense(usize),
    Point(usize),
}

impl System {
    fn new(layout: &Layout) -> Self {
        let nc = layout.dense_dim;
        let np = 3 * layout.points.len();
        Self {
            hcc: DMatrix::zeros(nc, nc),
            hcp: DMatrix::zeros(nc, np),
            hpp: vec![Matrix3::zeros(); layout.points.len()],
            gc: DVector::zeros(nc),
            gp: DVector::zeros(np),
        }
    }

    fn slot(layout: &Layout, k: &VarKey) -> Slot {
        match layout.points.get(k) {
            Some(o) => Slot::Point(*o),
            None => Slot::Dense(layout.offset[k]),
        }
    }

    fn add_factor(
        &mut self,
        layout: &Layout,
        keys: &[VarKey],
        r: &DVector<f64>,
        jac: &[DMatrix<f64>],
    ) {
        for (a, ja) in keys.iter().zip(jac) {
            let sa = Self::slot(layout, a);
            let ga = ja.transpose() * r;
            match sa {
                Slot::Dense(o) => {
                    let mut v = self.gc.rows_mut(o, ga.len());
                    v += &ga;
                }
                Slot::Point(o) => {
                    let mut v = self.gp.rows_mut(o, 3);
                    v += &ga;
                }
            }
            for (b, jb) in keys.iter().zip(jac) {
                let block = ja.transpose() * jb;
                match (&sa, Self::slot(layout, b)) {
                    (Slot::Dense(i), Slot::Dense(j)) => {
                        let mut v = self.hcc.view_mut((*i, j), block.shape());
                        v += &block;
                    }
                    (Slot::Dense(i), Slot::Point(j)) => {
                        let mut v = self.hcp.view_mut((*i, j), block.shape());
                        v += &block;
                    }
                    (Slot::Point(i), Slot::Point(j)) if *i == j => {
                        self.hpp[i / 3] += Matrix3::from_iterator(block.iter().copied());
                    }
                    _ => {}
                }
            }
        }
    }

    /// Adds the prior's Gauss-Newton terms; its Hessian is the stored information.
    fn add_prior(&mut self, layout: &Layout, p: &GaussianPrior, g: &DVector<f64>) {
        let mut cols = Vec::new();
        let mut off = 0;
        for k in &p.keys {
            cols.push((layout.offset[k], off, k.dim()));
            off += k.dim();
        }
        let h = &p.information;
        for &(ga, pa, da) in &cols {
            let mut v = self.gc.rows_mut(ga, da);
            v += g.rows(pa, da);
            for &(gb, pb, db) in &cols {
                let mut v = self.hcc.view_mut((ga, gb), (da, db));
                v += h.view((pa, pb), (da, db));
            }
        }
    }

    /// Solves `(H + λ·diag(H)) Δ = -g`.
    fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let nc = self.hcc.nrows();
        let mut a = self.hcc.clone();
        for i in 0..nc {
            a[(i, i)] += lambda * self.hcc[(i, i)].max(1e-9);
        }
        let mut rhs = -&self.gc;
        let mut c_inv = Vec::with_capacity(self.hpp.len());
        for (p, block) in self.hpp.iter().enumerate() {
            let mut c = *block;
            for i in 0..3 {
                c[(i, i)] += lambda * block[(i, i)].max(1e-9);
            }
            let inv = c.cholesky()?.inverse();
            let b = self.hcp.columns(3 * p, 3);
            let bc = b * inv;
            a -= &bc * b.transpose();
            rhs += &bc * self.gp.rows(3 * p, 3);
            c_inv.push(inv);
        }
        let x = if nc > 0 {
            cholesky_solve(&a, &rhs)?
        } else {
            DVector::zeros(0)
        };
        let mut dx = DVector::zeros(nc + 3 * self.hpp.len());
        dx.rows_mut(0, nc).copy_from(&x);
        for (p, inv) in c_inv.iter().enumerate() {
            let y = inv * (-self.gp.rows(3 * p, 3) - self.hcp.columns(3 * p, 3).transpose() * &x);
            dx.rows_mut(nc + 3 * p, 3).copy_from(&y);
        }
        if dx.iter().all(|v| v.is_finite()) {
            Some(dx)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::FactorKind;
    use crate::se3::{project, Intrinsics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0)
    }

    fn feature(cam: u64, lm: u64, z: nalgebra::Vector2<f64>, depth: Option<f64>) -> Factor {
        let n = if depth.is_some() { 3 } else { 2 };
        Factor {
            kind: FactorKind::StaticFeature { z, depth, k: k() },
            keys: vec![VarKey::Camera(cam), VarKey::Landmark(lm)],
            sqrt_info: DVector::from_element(n, 1.0),
            robust: None,
        }
    }

    fn pose_prior(cam: u64, pose: Pose, sigma: f64) -> Factor {
        Factor {
            kind: FactorKind::PosePrior { pose },
            keys: vec![VarKey::Camera(cam)],
            sqrt_info: DVector::from_element(6, 1.0 / sigma),
            robust: None,
        }
    }

    struct Scene {
        cams: Vec<Pose>,
        points: Vec<Vector3<f64>>,
    }

    fn scene(n_cams: usize, n_points: usize, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cams = (0..n_cams)
            .map(|i| {
                Pose::look_at(
                    &Vector3::new(i as f64 * 0.5, -8.0, 1.5),
                    &Vector3::new(i as f64 * 0.5, 0.0, 0.5),
                    &Vector3::z(),
                )
            })
            .collect();
        let points = (0..n_points)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-4.0..8.0),
                    rng.random_range(-2.0..3.0),
                    rng.random_range(-1.0..3.0),
                )
            })
            .collect();
        Scene { cams, points }
    }

    fn frame_insert(
        s: &Scene,
        f: usize,
        perturb: Option<&mut ChaCha8Rng>,
        depth: bool,
    ) -> FrameInsert {
        let mut states = Vec::new();
        let mut factors = Vec::new();
        let mut cam = s.cams[f];
        let mut pert_points: Vec<Vector3<f64>> = s.points.clone();
        if let Some(rng) = perturb {
            let d = Twist::new(
                Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
                Vector3::from_fn(|_, _| rng.random_range(-0.035..0.035)),
            );
            cam = cam.retract(&d);
            for p in &mut pert_points {
                *p += Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            }
        }
        states.push((VarKey::Camera(f as u64), StateValue::Pose(cam)));
        for (i, p) in s.points.iter().enumerate() {
            let pc = s.cams[f].inverse().transform_point(p);
            if let Ok(z) = project(&k(), &pc) {
                states.push((
                    VarKey::Landmark(i as u64),
                    StateValue::Point(pert_points[i]),
                ));
                factors.push(feature(f as u64, i as u64, z, depth.then_some(pc.z)));
            }
        }
        FrameInsert {
            frame: f as u64,
            states,
            factors,
        }
    }

    fn max_pose_error(w: &WindowState, s: &Scene) -> f64 {
        w.frames
            .iter()
            .map(|&f| {
                let est = w.pose(&VarKey::Camera(f)).unwrap();
                se3_log(&s.cams[f as usize].inverse().compose(est))
                    .unwrap()
                    .to_vector()
                    .norm()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn recovers_ground_truth_from_perturbed_window() {
        for (n_points, label) in [(60, "dense"), (260, "schur")] {
            let s = scene(6, n_points, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut w = WindowState::new(15);
            for f in 0..6 {
                let ins = frame_insert(&s, f, if f == 0 { None } else { Some(&mut rng) }, true);
                w.add_frame(ins).unwrap();
            }
            w.factors.push(pose_prior(0, s.cams[0], 1e-3));
            let report = w.lm_solve(&LmConfig::default()).unwrap();
            assert!(report.final_cost <= report.initial_cost);
            assert!(report.final_cost < 1e-12, "{label}: {report:?}");
            assert!(max_pose_error(&w, &s) < 1e-4, "{label}");
        }
    }

    #[test]
    fn schur_and_dense_steps_agree() {
        let s = scene(4, 250, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut w = WindowState::new(15);
        for f in 0..4 {
            w.add_frame(frame_insert(&s, f, Some(&mut rng), true))
                .unwrap();
        }
        w.factors.push(pose_prior(0, s.cams[0], 1e-2));
        let none = BTreeSet::new();
        let dense = Layout::new(&w.values, &none, usize::MAX);
        let schur = Layout::new(&w.values, &none, 200);
        assert!(!schur.points.is_empty());
        let mut steps = Vec::new();
        for layout in [&dense, &schur] {
            let mut sys = System::new(layout);
            for f in &w.factors {
                let lin = f.linearize(&w).unwrap();
                sys.add_factor(layout, &f.keys, &lin.residual, &lin.jacobians);
            }
            let dx = sys.solve(1e-3).unwrap();
            let by_key: BTreeMap<VarKey, Vec<f64>> = layout
                .offset
                .iter()
                .map(|(k, o)| (*k, dx.rows(*o, k.dim()).iter().copied().collect()))
                .collect();
            steps.push(by_key);
        }
        for (k, a) in &steps[0] {
            let b = &steps[1][k];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()), "{k:?}");
            }
        }
    }

    #[test]
    fn zero_factor_guard_and_fixed_point() {
        let mut w = WindowState::new(15);
        w.add_frame(FrameInsert {
            frame: 0,
            states: vec![(VarKey::Camera(0), StateValue::Pose(Pose::identity()))],
            factors: vec![],
        })
        .unwrap();
        assert!(matches!(
            w.lm_solve(&LmConfig::default()),
            Err(Error::NoFactors)
        ));

        let s = scene(3, 40, 11);
        let mut w = WindowState::new(15);
        for f in 0..3 {
            w.add_frame(frame_insert(&s, f, None, true)).unwrap();
        }
        w.factors.push(pose_prior(0, s.cams[0], 1e-3));
        let before = w.total_cost();
        let r = w.lm_solve(&LmConfig::default()).unwrap();
        assert_eq!(r.accepted, 0);
        assert!((r.final_cost - before).abs() < 1e-12);
    }

    #[test]
    fn add_frame_rules() {
        let s = scene(20, 30, 12);
        let mut w = WindowState::new(15);
        w.add_frame(frame_insert(&s, 0, None, true)).unwrap();
        assert_eq!(w.len(), 1);
        assert!(matches!(
            w.add_frame(frame_insert(&s, 0, None, true)),
            Err(Error::NonMonotoneFrameId { last: 0, got: 0 })
        ));
        let mut bad = frame_insert(&s, 1, None, true);
        bad.factors
            .push(feature(1, 999, nalgebra::Vector2::new(1.0, 1.0), None));
        assert!(matches!(w.add_frame(bad), Err(Error::DanglingFactor(_))));
        assert_eq!(w.len(), 1);
        for f in 1..15 {
            w.add_frame(frame_insert(&s, f, None, true)).unwrap();
        }
        assert_eq!(w.len(), 15);
        assert!(w.prior.is_none());
        w.add_frame(frame_insert(&s, 15, None, true)).unwrap();
        assert_eq!(w.len(), 15);
        assert!(w.prior.as_ref().is_some_and(|p| p.dim() > 0));
        assert_eq!(w.frames[0], 1);
        assert!(w.pose(&VarKey::Camera(0)).is_none());
        // every factor references live states
        for f in &w.factors {
            assert!(f.keys.iter().all(|k| w.values.contains_key(k)));
        }
    }

    #[test]
    fn marginalize_below_capacity_is_noop() {
        let s = scene(3, 30, 13);
        let mut w = WindowState::new(15);
        for f in 0..3 {
            w.add_frame(frame_insert(&s, f, None, true)).unwrap();
        }
        let n = w.factors.len();
        w.marginalize_oldest().unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.factors.len(), n);
        assert!(w.prior.is_none());
    }

    /// Two disjoint chains: frame 0 observes its own landmarks only.
    #[test]
    fn independent_oldest_frame_equals_dropping() {
        let s = scene(5, 40, 14);
        let build = |with_isolated: bool| {
            let mut w = WindowState::new(5);
            if with_isolated {
                // frame 0 with private landmarks 1000+
                let mut ins = FrameInsert {
                    frame: 0,
                    ..Default::default()
                };
                ins.states
                    .push((VarKey::Camera(0), StateValue::Pose(Pose::identity())));
                for i in 0..10u64 {
                    let p = Vector3::new(i as f64 * 0.2 - 1.0, 0.3, 6.0);
                    ins.states
                        .push((VarKey::Landmark(1000 + i), StateValue::Point(p)));
                    ins.factors
                        .push(feature(0, 1000 + i, project(&k(), &p).unwrap(), Some(6.0)));
                }
                ins.factors.push(pose_prior(0, Pose::identity(), 1e-3));
                w.add_frame(ins).unwrap();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            for f in 1..5 {
                let mut ins = frame_insert(&s, f, Some(&mut rng), true);
                if f == 1 {
                    ins.factors.push(pose_prior(1, s.cams[1], 1e-3));
                }
                w.add_frame(ins).unwrap();
            }
            w
        };
        let mut a = build(true);
        a.add_frame(FrameInsert {
            frame: 5,
            states: vec![(VarKey::Camera(5), StateValue::Pose(Pose::identity()))],
            factors: vec![pose_prior(5, Pose::identity(), 1.0)],
        })
        .unwrap();
        assert!(a.prior.is_none());
        let mut b = build(false);
        b.add_frame(FrameInsert {
            frame: 5,
            states: vec![(VarKey::Camera(5), StateValue::Pose(Pose::identity()))],
            factors: vec![pose_prior(5, Pose::identity(), 1.0)],
        })
        .unwrap();
        a.lm_solve(&LmConfig::default()).unwrap();
        b.lm_solve(&LmConfig::default()).unwrap();
        assert_eq!(a.values.len(), b.values.len());
        for (k, va) in &a.values {
            let d = va.local(&b.values[k]).unwrap();
            assert!(d.amax() < 1e-8, "{k:?}");
        }
    }

    #[test]
    fn prior_stays_psd_over_long_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n_frames = 100;
        let cams: Vec<Pose> = (0..n_frames)
            .map(|i| {
                let t = i as f64 * 0.3;
                Pose::look_at(
                    &Vector3::new(t, -8.0, 1.5),
                    &Vector3::new(t, 0.0, 0.5),
                    &Vector3::z(),
                )
            })
            .collect();
        let points: Vec<Vector3<f64>> = (0..400)
            .map(|i| {
                Vector3::new(
                    i as f64 * 0.08 - 2.0,
                    rng.random_range(-2.0..3.0),
                    rng.random_range(-1.0..2.5),
                )
            })
            .collect();
        let mut w = WindowState::new(15);
        for f in 0..n_frames {
            let mut ins = FrameInsert {
                frame: f as u64,
                ..Default::default()
            };
            let noisy = cams[f].retract(&Twist::new(Vector3::repeat(0.01), Vector3::repeat(0.002)));
            ins.states
                .push((VarKey::Camera(f as u64), StateValue::Pose(noisy)));
            for (i, p) in points.iter().enumerate() {
                let pc = cams[f].inverse().transform_point(p);
                if let Ok(z) = project(&k(), &pc) {
                    if (0.0..640.0).contains(&z.x) && (0.0..480.0).contains(&z.y) {
                        ins.states
                            .push((VarKey::Landmark(i as u64), StateValue::Point(*p)));
                        ins.factors.push(feature(f as u64, i as u64, z, Some(pc.z)));
                    }
                }
            }
            if f == 0 {
                ins.factors.push(pose_prior(0, cams[0], 1e-3));
            }
            w.add_frame(ins).unwrap();
            if let Some(p) = &w.prior {
                let asym = (&p.information - p.information.transpose()).amax();
                assert!(asym < 1e-9);
                assert!(p.is_psd(1e-9), "frame {f}");
            }
            if f % 10 == 9 {
                w.lm_solve(&LmConfig {
                    max_iters: 5,
                    ..Default::default()
                })
                .unwrap();
            }
        }
        assert!(w.prior.is_some());
        let err = se3_log(
            &cams[n_frames - 1]
                .inverse()
                .compose(w.pose(&VarKey::Camera(n_frames as u64 - 1)).unwrap()),
        )
        .unwrap()
        .to_vector()
        .norm();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn accepted_steps_decrease_cost_and_are_deterministic() {
        let s = scene(5, 80, 17);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(18);
            let mut w = WindowState::new(15);
            for f in 0..5 {
                w.add_frame(frame_insert(&s, f, Some(&mut rng), false))
                    .unwrap();
            }
            w.factors.push(pose_prior(0, s.cams[0], 1e-3));
            for f in &mut w.factors {
                if matches!(f.kind, FactorKind::StaticFeature { .. }) {
                    f.robust = Some(crate::factors::RobustKernel::TStudent { nu: 5.0 });
                }
            }
            let r = w
                .lm_solve(&LmConfig {
                    max_iters: 10,
                    ..Default::default()
                })
                .unwrap();
            (r, w.values)
        };
        let (r1, v1) = run();
        let (r2, v2) = run();
        assert!(r1.final_cost < r1.initial_cost);
        assert_eq!(r1, r2);
        assert_eq!(v1, v2);
    }
}
