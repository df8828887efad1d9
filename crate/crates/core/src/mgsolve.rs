//! Geometric multigrid preconditioners for the filtered Jacobian.
//!
//! Every level carries its own linearization (nodal injection of the fine
//! state), constraint set, operator diagonal and per-block spectrum estimates.
//! Smoothing is Chebyshev-accelerated Jacobi applied separately to the
//! displacement and phase-field blocks; the coarsest level is solved
//! approximately by a Chebyshev iteration of fixed degree.

use crate::error::{invalid, Result};
use crate::fem::{ConstraintMask, LevelTransfer};
use crate::krylov::{estimate_spectrum, LinearOperator, SpectrumEstimate};
use crate::mesh::GridHierarchy;
use crate::model::{Block, LevelSpace, LinearizationState, MaterialParams, PhaseFieldOperator, SplitKind};
use crate::scalar::{axpy, Real};

/// Discretization data of every level, built once per mesh and material.
pub struct LevelStack<'m, T> {
    pub spaces: Vec<LevelSpace<'m, T>>,
    /// `transfers[l]` maps between level `l` and `l + 1`.
    pub transfers: Vec<LevelTransfer<T>>,
}

impl<'m, T: Real> LevelStack<'m, T> {
    pub fn new(hierarchy: &'m GridHierarchy<T>, params: &MaterialParams<T>) -> Self {
        let spaces = hierarchy
            .levels()
            .iter()
            .enumerate()
            .map(|(l, mesh)| LevelSpace::new(mesh, l, params))
            .collect();
        let transfers = hierarchy
            .levels()
            .windows(2)
            .map(|w| LevelTransfer::new(&w[0], &w[1]))
            .collect();
        Self { spaces, transfers }
    }

    pub fn n_levels(&self) -> usize {
        self.spaces.len()
    }

    pub fn finest(&self) -> &LevelSpace<'m, T> {
        self.spaces.last().expect("at least one level")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreconditionerKind {
    /// One V-cycle on the coupled operator with a block-diagonal smoother.
    Full,
    /// Independent V-cycles on the displacement and phase-field blocks.
    BlockDiag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChebyshevMode {
    Smoother,
    Solver,
}

/// Degree and target interval of a Chebyshev-Jacobi iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChebyshevParams<T> {
    pub degree: usize,
    pub a: T,
    pub b: T,
    pub mode: ChebyshevMode,
}

impl<T: Real> ChebyshevParams<T> {
    /// `[1.2 lambda_max / 5, 1.2 lambda_max]`
    pub fn smoother(spectrum: &SpectrumEstimate<T>, degree: usize) -> Self {
        let b = T::lit(1.2) * spectrum.lambda_max;
        Self {
            degree,
            a: b / T::lit(5.0),
            b,
            mode: ChebyshevMode::Smoother,
        }
    }

    /// `[0.9 lambda_min, 1.2 lambda_max]` with the smallest degree whose
    /// error bound `1 / T_d((b + a) / (b - a))` drops below `tol`, at most `max_degree`.
    pub fn solver(spectrum: &SpectrumEstimate<T>, tol: f64, max_degree: usize) -> Self {
        let b = T::lit(1.2) * spectrum.lambda_max;
        // an indefinite estimate would leave the Chebyshev recurrence undefined
        let a = (T::lit(0.9) * spectrum.lambda_min).max(T::lit(1e-6) * b);
        let sigma = ((b + a) / (b - a)).to_f64_lossy();
        let mut degree = 1;
        while degree < max_degree && chebyshev_bound(sigma, degree) >= tol {
            degree += 1;
        }
        Self {
            degree,
            a,
            b,
            mode: ChebyshevMode::Solver,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(invalid("Chebyshev degree must be positive"));
        }
        if !(self.a > T::zero() && self.a < self.b) {
            return Err(invalid(format!("invalid Chebyshev interval [{}, {}]", self.a, self.b)));
        }
        Ok(())
    }
}

/// `1 / T_d(sigma)` for `sigma > 1`.
pub fn chebyshev_bound(sigma: f64, degree: usize) -> f64 {
    1.0 / (degree as f64 * sigma.acosh()).cosh()
}

/// Degree-`d` Chebyshev acceleration of Jacobi for `A x = b`, updating `x` in place.
///
/// The error is multiplied by `T_d((theta - D^{-1}A) / delta) / T_d(theta / delta)`
/// with `theta = (a + b) / 2`, `delta = (b - a) / 2`. Entries flagged in `skip`
/// are never changed.
pub fn chebyshev_apply<T: Real, A: LinearOperator<T>>(
    op: &A,
    diag: &[T],
    params: &ChebyshevParams<T>,
    skip: &[bool],
    x: &mut [T],
    b: &[T],
    x_is_zero: bool,
) {
    let n = b.len();
    let two = T::lit(2.0);
    let theta = (params.a + params.b) / two;
    let delta = (params.b - params.a) / two;
    let sigma = theta / delta;
    let mut rho = T::one() / sigma;
    let mut r = b.to_vec();
    let mut tmp = vec![T::zero(); n];
    if !x_is_zero {
        op.apply(x, &mut tmp);
        for (ri, &ti) in r.iter_mut().zip(&tmp) {
            *ri -= ti;
        }
    }
    let mut d: Vec<T> = r
        .iter()
        .zip(diag)
        .zip(skip)
        .map(|((&ri, &di), &s)| if s { T::zero() } else { ri / (di * theta) })
        .collect();
    for k in 1..=params.degree {
        axpy(T::one(), &d, x);
        if k == params.degree {
            break;
        }
        op.apply(&d, &mut tmp);
        for (ri, &ti) in r.iter_mut().zip(&tmp) {
            *ri -= ti;
        }
        let rho_new = T::one() / (two * sigma - rho);
        let c1 = rho_new * rho;
        let c2 = two * rho_new / delta;
        for (((di, &ri), &dg), &s) in d.iter_mut().zip(&r).zip(diag).zip(skip) {
            *di = if s { T::zero() } else { c1 * *di + c2 * ri / dg };
        }
        rho = rho_new;
    }
}

impl<T: Real> LinearOperator<T> for PhaseFieldOperator<'_, '_, T> {
    fn size(&self) -> usize {
        self.n_dofs()
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        self.vmult(src, dst)
    }
}

/// One diagonal block (or the full operator) of a level Jacobian.
pub struct BlockOperator<'a, 's, 'm, T> {
    pub op: &'a PhaseFieldOperator<'s, 'm, T>,
    pub block: Block,
}

impl<T: Real> LinearOperator<T> for BlockOperator<'_, '_, '_, T> {
    fn size(&self) -> usize {
        self.op.n_dofs()
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        self.op.apply_block(self.block, src, dst)
    }
}

/// Multigrid settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgParams {
    pub smoother_degree: usize,
    /// CG iterations for the eigenvalue estimates.
    pub eig_iters: usize,
    /// Target error reduction of the coarse Chebyshev solve.
    pub coarse_tol: f64,
    pub coarse_max_degree: usize,
    pub seed: u64,
}

impl Default for MgParams {
    fn default() -> Self {
        Self {
            smoother_degree: 4,
            eig_iters: 10,
            coarse_tol: 1e-3,
            coarse_max_degree: 30,
            seed: 0x5EED,
        }
    }
}

/// Linearized operator and smoother data on one level.
pub struct LevelContext<'s, 'm, T> {
    pub level: usize,
    pub state: LinearizationState<T>,
    pub active: Vec<bool>,
    pub dirichlet: Vec<bool>,
    pub op: PhaseFieldOperator<'s, 'm, T>,
    pub diag: Vec<T>,
    pub spectrum_u: SpectrumEstimate<T>,
    pub spectrum_phi: SpectrumEstimate<T>,
    skip_u: Vec<bool>,
    skip_phi: Vec<bool>,
}

impl<T: Real> LevelContext<'_, '_, T> {
    pub fn constrained(&self) -> &[bool] {
        &self.op.mask().is_constrained
    }

    fn skip(&self, block: Block) -> &[bool] {
        match block {
            Block::U => &self.skip_u,
            Block::Phi => &self.skip_phi,
            Block::Full => self.constrained(),
        }
    }

    fn spectrum(&self, block: Block) -> &SpectrumEstimate<T> {
        match block {
            Block::Phi => &self.spectrum_phi,
            _ => &self.spectrum_u,
        }
    }

    fn block_op(&self, block: Block) -> BlockOperator<'_, '_, '_, T> {
        BlockOperator { op: &self.op, block }
    }
}

/// Injects the fine state and masks to every level and sets up level
/// operators, diagonals and spectrum estimates (index = level).
pub fn build_level_contexts<'s, 'm, T: Real>(
    stack: &'s LevelStack<'m, T>,
    fine_state: &LinearizationState<T>,
    fine_active: &[bool],
    fine_dirichlet: &[bool],
    params: &MaterialParams<T>,
    split: SplitKind,
    mg: &MgParams,
) -> Result<Vec<LevelContext<'s, 'm, T>>> {
    let n_levels = stack.n_levels();
    let n_fine = stack.finest().n_dofs();
    if fine_state.u.len() != n_fine || fine_active.len() != n_fine || fine_dirichlet.len() != n_fine {
        return Err(invalid("fine state and masks must match the finest DoF count"));
    }
    let mut states = vec![fine_state.clone()];
    let mut actives = vec![fine_active.to_vec()];
    let mut dirichlets = vec![fine_dirichlet.to_vec()];
    for l in (0..n_levels - 1).rev() {
        let tr = &stack.transfers[l];
        let s = states.last().expect("nonempty");
        let coarse = LinearizationState {
            u: tr.restrict_nodal(&s.u)?,
            u_prev1: tr.restrict_nodal(&s.u_prev1)?,
            u_prev2: tr.restrict_nodal(&s.u_prev2)?,
            t: s.t,
            t_prev1: s.t_prev1,
            t_prev2: s.t_prev2,
            phi_tilde: tr.restrict_nodal(&s.phi_tilde)?,
        };
        let a = tr.restrict_nodal(actives.last().expect("nonempty"))?;
        let d = tr.restrict_nodal(dirichlets.last().expect("nonempty"))?;
        states.push(coarse);
        actives.push(a);
        dirichlets.push(d);
    }
    states.reverse();
    actives.reverse();
    dirichlets.reverse();

    let mut contexts = Vec::with_capacity(n_levels);
    for (l, ((state, active), dirichlet)) in states.into_iter().zip(actives).zip(dirichlets).enumerate() {
        let space = &stack.spaces[l];
        let n = space.n_dofs();
        let mut mask = ConstraintMask::none(n);
        for i in 0..n {
            mask.is_constrained[i] = active[i] || dirichlet[i];
        }
        let op = PhaseFieldOperator::new(space, &state, mask, params, split);
        let diag = op.diagonal();
        let constrained = &op.mask().is_constrained;
        let skip_u: Vec<bool> = (0..n).map(|i| constrained[i] || space.map.is_phi(i)).collect();
        let skip_phi: Vec<bool> = (0..n).map(|i| constrained[i] || !space.map.is_phi(i)).collect();
        let seed = mg.seed.wrapping_add(2 * l as u64);
        let spectrum_u = estimate_spectrum(
            &BlockOperator { op: &op, block: Block::U },
            &diag,
            mg.eig_iters,
            seed,
            Some(&skip_u),
        )?;
        let spectrum_phi = estimate_spectrum(
            &BlockOperator { op: &op, block: Block::Phi },
            &diag,
            mg.eig_iters,
            seed + 1,
            Some(&skip_phi),
        )?;
        contexts.push(LevelContext {
            level: l,
            state,
            active,
            dirichlet,
            op,
            diag,
            spectrum_u,
            spectrum_phi,
            skip_u,
            skip_phi,
        });
    }
    Ok(contexts)
}

/// V(1,1)-cycle preconditioner over a set of level contexts.
pub struct Multigrid<'s, 'm, T> {
    stack: &'s LevelStack<'m, T>,
    contexts: Vec<LevelContext<'s, 'm, T>>,
    kind: PreconditionerKind,
    mg: MgParams,
}

impl<'s, 'm, T: Real> Multigrid<'s, 'm, T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stack: &'s LevelStack<'m, T>,
        fine_state: &LinearizationState<T>,
        fine_active: &[bool],
        fine_dirichlet: &[bool],
        params: &MaterialParams<T>,
        split: SplitKind,
        kind: PreconditionerKind,
        mg: MgParams,
    ) -> Result<Self> {
        let contexts = build_level_contexts(stack, fine_state, fine_active, fine_dirichlet, params, split, &mg)?;
        Ok(Self {
            stack,
            contexts,
            kind,
            mg,
        })
    }

    pub fn contexts(&self) -> &[LevelContext<'s, 'm, T>] {
        &self.contexts
    }

    /// Filtered Jacobian on the finest level.
    pub fn fine_operator(&self) -> &PhaseFieldOperator<'s, 'm, T> {
        &self.contexts.last().expect("at least one level").op
    }

    pub fn kind(&self) -> PreconditionerKind {
        self.kind
    }

    /// Applies the preconditioner to a fine residual.
    pub fn vcycle(&self, r: &[T]) -> Vec<T> {
        let top = self.contexts.len() - 1;
        let mut b = r.to_vec();
        let ctx = &self.contexts[top];
        ctx.op.mask().zero_constrained(&mut b);
        match self.kind {
            PreconditionerKind::Full => self.cycle(top, Block::Full, &b),
            PreconditionerKind::BlockDiag => {
                let mut x = self.cycle(top, Block::U, &mask_out(&b, &ctx.skip_u));
                let y = self.cycle(top, Block::Phi, &mask_out(&b, &ctx.skip_phi));
                axpy(T::one(), &y, &mut x);
                x
            }
        }
    }

    /// Approximate solve on level 0.
    pub fn coarse_solve(&self, r: &[T]) -> Vec<T> {
        let mut b = r.to_vec();
        self.contexts[0].op.mask().zero_constrained(&mut b);
        match self.kind {
            PreconditionerKind::Full => self.coarse(Block::Full, &b),
            PreconditionerKind::BlockDiag => {
                let ctx = &self.contexts[0];
                let mut x = self.coarse(Block::U, &mask_out(&b, &ctx.skip_u));
                let y = self.coarse(Block::Phi, &mask_out(&b, &ctx.skip_phi));
                axpy(T::one(), &y, &mut x);
                x
            }
        }
    }

    fn cheb_block(&self, ctx: &LevelContext<'_, '_, T>, block: Block, params: &ChebyshevParams<T>, b: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); b.len()];
        chebyshev_apply(&ctx.block_op(block), &ctx.diag, params, ctx.skip(block), &mut x, b, true);
        x
    }

    fn smoother_params(&self, ctx: &LevelContext<'_, '_, T>, block: Block) -> ChebyshevParams<T> {
        ChebyshevParams::smoother(ctx.spectrum(block), self.mg.smoother_degree)
    }

    fn solver_params(&self, ctx: &LevelContext<'_, '_, T>, block: Block) -> ChebyshevParams<T> {
        ChebyshevParams::solver(ctx.spectrum(block), self.mg.coarse_tol, self.mg.coarse_max_degree)
    }

    /// `x += S (b - A x)` with the block-diagonal Chebyshev smoother.
    fn smooth(&self, ctx: &LevelContext<'_, '_, T>, sel: Block, x: &mut [T], b: &[T], x_is_zero: bool) {
        let mut r = b.to_vec();
        if !x_is_zero {
            let mut ax = vec![T::zero(); b.len()];
            ctx.block_op(sel).apply(x, &mut ax);
            for (ri, &a) in r.iter_mut().zip(&ax) {
                *ri -= a;
            }
        }
        let blocks: &[Block] = match sel {
            Block::Full => &[Block::U, Block::Phi],
            Block::U => &[Block::U],
            Block::Phi => &[Block::Phi],
        };
        for &blk in blocks {
            let c = self.cheb_block(ctx, blk, &self.smoother_params(ctx, blk), &r);
            axpy(T::one(), &c, x);
        }
    }

    fn coarse(&self, sel: Block, b: &[T]) -> Vec<T> {
        let ctx = &self.contexts[0];
        match sel {
            Block::U | Block::Phi => self.cheb_block(ctx, sel, &self.solver_params(ctx, sel), b),
            Block::Full => {
                let mut x = self.cheb_block(ctx, Block::U, &self.solver_params(ctx, Block::U), b);
                let mut coupled = vec![T::zero(); b.len()];
                ctx.op.vmult(&x, &mut coupled);
                let b_phi: Vec<T> = b
                    .iter()
                    .zip(&coupled)
                    .zip(&ctx.skip_phi)
                    .map(|((&bi, &ci), &s)| if s { T::zero() } else { bi - ci })
                    .collect();
                let y = self.cheb_block(ctx, Block::Phi, &self.solver_params(ctx, Block::Phi), &b_phi);
                axpy(T::one(), &y, &mut x);
                x
            }
        }
    }

    fn cycle(&self, l: usize, sel: Block, b: &[T]) -> Vec<T> {
        if l == 0 {
            return self.coarse(sel, b);
        }
        let ctx = &self.contexts[l];
        let coarse_ctx = &self.contexts[l - 1];
        let tr = &self.stack.transfers[l - 1];
        let n = b.len();
        let mut x = vec![T::zero(); n];
        self.smooth(ctx, sel, &mut x, b, true);

        let mut r = vec![T::zero(); n];
        ctx.block_op(sel).apply(&x, &mut r);
        for (ri, &bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let mut rc = tr.restrict(&r).expect("level sizes match");
        zero_flagged(&mut rc, coarse_ctx.skip(sel));
        let ec = self.cycle(l - 1, sel, &rc);
        let mut e = tr.prolongate(&ec).expect("level sizes match");
        zero_flagged(&mut e, ctx.skip(sel));
        axpy(T::one(), &e, &mut x);

        self.smooth(ctx, sel, &mut x, b, false);
        zero_flagged(&mut x, ctx.skip(sel));
        x
    }
}

impl<T: Real> LinearOperator<T> for Multigrid<'_, '_, T> {
    fn size(&self) -> usize {
        self.fine_operator().n_dofs()
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        dst.copy_from_slice(&self.vcycle(src));
    }
}

fn zero_flagged<T: Real>(v: &mut [T], flags: &[bool]) {
    for (x, &f) in v.iter_mut().zip(flags) {
        if f {
            *x = T::zero();
        }
    }
}

fn mask_out<T: Real>(v: &[T], flags: &[bool]) -> Vec<T> {
    let mut out = v.to_vec();
    zero_flagged(&mut out, flags);
    out
}
