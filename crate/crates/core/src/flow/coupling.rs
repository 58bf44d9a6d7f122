//! Fourier-feature affine coupling.
//!
//! The input splits into a conditioning half `x_c` and a transformed half
//! `x_t`. The transformed half becomes `exp(s(x_c)) * x_t + t(x_c)`, where
//! both `s` and `t` are sums of learned cosine features
//! `sum_k Theta_k cos(2 pi k x_c / R + phi_k)`. Everything the loss needs
//! (JVP, log-determinant, inverse, and their reverse passes) is closed-form.

use std::f64::consts::PI;
use std::ops::Range;

/// Cosine feature map `R^c -> R^t` with `k` harmonics.
#[derive(Clone, Debug)]
pub struct FourierFeatures {
    k: usize,
    rows: usize,
    cols: usize,
    /// `cols x k x rows`: entry `(c, k, r)` weighs harmonic `k` of input `c`
    /// in output `r`.
    theta: Vec<f64>,
    /// `cols x k`.
    phase: Vec<f64>,
    cos_phase: Vec<f64>,
    sin_phase: Vec<f64>,
}

impl FourierFeatures {
    pub fn new(k: usize, rows: usize, cols: usize, theta: Vec<f64>, phase: Vec<f64>) -> Self {
        assert_eq!(theta.len(), k * rows * cols);
        assert_eq!(phase.len(), k * cols);
        let mut f = FourierFeatures {
            k,
            rows,
            cols,
            theta,
            phase,
            cos_phase: Vec::new(),
            sin_phase: Vec::new(),
        };
        f.refresh();
        f
    }

    fn refresh(&mut self) {
        self.cos_phase = self.phase.iter().map(|p| p.cos()).collect();
        self.sin_phase = self.phase.iter().map(|p| p.sin()).collect();
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn num_params(&self) -> usize {
        self.theta.len() + self.phase.len()
    }

    fn write_params(&self, out: &mut [f64]) {
        let nt = self.theta.len();
        out[..nt].copy_from_slice(&self.theta);
        out[nt..nt + self.phase.len()].copy_from_slice(&self.phase);
    }

    fn read_params(&mut self, src: &[f64]) {
        let nt = self.theta.len();
        self.theta.copy_from_slice(&src[..nt]);
        let np = self.phase.len();
        self.phase.copy_from_slice(&src[nt..nt + np]);
        self.refresh();
    }

    /// Upper bound on `|F(x)|_inf` over all `x`: the largest absolute row sum
    /// of the stacked `Theta_k`.
    pub fn output_bound(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.theta.iter().skip(r).step_by(self.rows).map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Reverse pass through the feature values and, when `TANGENT`, their
    /// directional derivatives along `vc`. Accumulates into `xc_bar`,
    /// `vc_bar` and the parameter adjoints `grad`.
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn backward<const TANGENT: bool>(
        &self,
        cf: &[f64],
        sf: &[f64],
        raw_bar: &[f64],
        draw_bar: &[f64],
        vc: &[f64],
        omega: f64,
        xc_bar: &mut [f64],
        vc_bar: &mut [f64],
        grad: &mut [f64],
    ) {
        let (k, rows, cols) = (self.k, self.rows, self.cols);
        let kc = k * cols;
        let (g_theta, g_phase) = grad.split_at_mut(kc * rows);
        if rows == 1 && cols == 1 {
            let (theta, g_theta, g_phase) = (&self.theta[..k], &mut g_theta[..k], &mut g_phase[..k]);
            let (cf, sf) = (&cf[..k], &sf[..k]);
            let rb = raw_bar[0];
            let (db, vcc) = if TANGENT { (draw_bar[0], vc[0]) } else { (0.0, 0.0) };
            let (mut xc_acc, mut vc_acc) = (0.0, 0.0);
            for kk in 0..k {
                let fk = omega * (kk + 1) as f64;
                let (cfv, sfv) = (cf[kk], sf[kk]);
                let th = theta[kk];
                let cf_bar = th * rb;
                let mut sf_bar = 0.0;
                if TANGENT {
                    let q = -fk * th * db;
                    g_theta[kk] += rb * cfv - fk * sfv * vcc * db;
                    sf_bar = q * vcc;
                    vc_acc += q * sfv;
                } else {
                    g_theta[kk] += rb * cfv;
                }
                let angle_bar = sf_bar * cfv - cf_bar * sfv;
                g_phase[kk] += angle_bar;
                xc_acc += fk * angle_bar;
            }
            xc_bar[0] += xc_acc;
            if TANGENT {
                vc_bar[0] += vc_acc;
            }
            return;
        }
        let g_phase = &mut g_phase[..kc];
        let theta = &self.theta[..kc * rows];
        let (cf, sf) = (&cf[..kc], &sf[..kc]);
        let raw_bar = &raw_bar[..rows];
        for c in 0..cols {
            let p = c * k..(c + 1) * k;
            let (cf, sf, g_phase) = (&cf[p.clone()], &sf[p.clone()], &mut g_phase[p]);
            let w = c * k * rows..(c + 1) * k * rows;
            let (theta, g_theta) = (&theta[w.clone()], &mut g_theta[w]);
            let vcc = if TANGENT { vc[c] } else { 0.0 };
            let (mut xc_acc, mut vc_acc) = (0.0, 0.0);
            for kk in 0..k {
                let fk = omega * (kk + 1) as f64;
                let (cfv, sfv) = (cf[kk], sf[kk]);
                let th = &theta[kk * rows..(kk + 1) * rows];
                let gt = &mut g_theta[kk * rows..(kk + 1) * rows];
                let mut cf_bar = 0.0;
                let mut sf_bar = 0.0;
                if TANGENT {
                    let draw_bar = &draw_bar[..rows];
                    let mut q = 0.0;
                    let coef = fk * sfv * vcc;
                    for r in 0..rows {
                        cf_bar += th[r] * raw_bar[r];
                        q += th[r] * draw_bar[r];
                        gt[r] += raw_bar[r] * cfv - coef * draw_bar[r];
                    }
                    q *= -fk;
                    sf_bar = q * vcc;
                    vc_acc += q * sfv;
                } else {
                    for r in 0..rows {
                        cf_bar += th[r] * raw_bar[r];
                        gt[r] += raw_bar[r] * cfv;
                    }
                }
                let angle_bar = sf_bar * cfv - cf_bar * sfv;
                g_phase[kk] += angle_bar;
                xc_acc += fk * angle_bar;
            }
            xc_bar[c] += xc_acc;
            if TANGENT {
                vc_bar[c] += vc_acc;
            }
        }
    }
}

/// Per-sample feature values. Stored contiguously as
/// `[cf_s | sf_s | cf_t | sf_t]` (`k * cols` each) followed by
/// `[draw_s | th | g | e]` (`rows` each), so that a tape can keep them.
struct Feat<'a> {
    cf_s: &'a [f64],
    sf_s: &'a [f64],
    cf_t: &'a [f64],
    sf_t: &'a [f64],
    /// Directional derivative of the raw log-scale.
    draw_s: &'a [f64],
    /// `tanh(raw_s / m)` (0 without clamp).
    th: &'a [f64],
    /// `ds / draw_s`.
    g: &'a [f64],
    /// `exp(s)`.
    e: &'a [f64],
}

struct FeatMut<'a> {
    cf_s: &'a mut [f64],
    sf_s: &'a mut [f64],
    cf_t: &'a mut [f64],
    sf_t: &'a mut [f64],
    draw_s: &'a mut [f64],
    th: &'a mut [f64],
    g: &'a mut [f64],
    e: &'a mut [f64],
}

fn feat(buf: &[f64], kc: usize, rows: usize) -> Feat<'_> {
    let (cf_s, rest) = buf.split_at(kc);
    let (sf_s, rest) = rest.split_at(kc);
    let (cf_t, rest) = rest.split_at(kc);
    let (sf_t, rest) = rest.split_at(kc);
    let (draw_s, rest) = rest.split_at(rows);
    let (th, rest) = rest.split_at(rows);
    let (g, rest) = rest.split_at(rows);
    Feat {
        cf_s,
        sf_s,
        cf_t,
        sf_t,
        draw_s,
        th,
        g,
        e: &rest[..rows],
    }
}

fn feat_mut(buf: &mut [f64], kc: usize, rows: usize) -> FeatMut<'_> {
    let (cf_s, rest) = buf.split_at_mut(kc);
    let (sf_s, rest) = rest.split_at_mut(kc);
    let (cf_t, rest) = rest.split_at_mut(kc);
    let (sf_t, rest) = rest.split_at_mut(kc);
    let (draw_s, rest) = rest.split_at_mut(rows);
    let (th, rest) = rest.split_at_mut(rows);
    let (g, rest) = rest.split_at_mut(rows);
    FeatMut {
        cf_s,
        sf_s,
        cf_t,
        sf_t,
        draw_s,
        th,
        g,
        e: &mut rest[..rows],
    }
}

/// Per-sample intermediate values, reused across calls.
#[derive(Clone, Debug, Default)]
pub struct CouplingScratch {
    feat: Vec<f64>,
    raw_s: Vec<f64>,
    raw_t: Vec<f64>,
    draw_t: Vec<f64>,
    s: Vec<f64>,
    raw_s_bar: Vec<f64>,
    raw_t_bar: Vec<f64>,
    draw_s_bar: Vec<f64>,
    draw_t_bar: Vec<f64>,
}

impl CouplingScratch {
    pub fn ensure(&mut self, k: usize, cols: usize, rows: usize) {
        let need = 4 * k * cols + 4 * rows;
        if self.feat.len() < need {
            self.feat.resize(need, 0.0);
        }
        for buf in [
            &mut self.raw_s,
            &mut self.raw_t,
            &mut self.draw_t,
            &mut self.s,
            &mut self.raw_s_bar,
            &mut self.raw_t_bar,
            &mut self.draw_s_bar,
            &mut self.draw_t_bar,
        ] {
            if buf.len() < rows {
                buf.resize(rows, 0.0);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    dim: usize,
    /// Size of the first half, `ceil(dim / 2)`.
    split: usize,
    reversed: bool,
    k: usize,
    range: f64,
    clamp: Option<f64>,
    scale: FourierFeatures,
    shift: FourierFeatures,
}

impl CouplingLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        reversed: bool,
        k: usize,
        range: f64,
        clamp: Option<f64>,
        scale: (Vec<f64>, Vec<f64>),
        shift: (Vec<f64>, Vec<f64>),
    ) -> Self {
        assert!(dim >= 2, "coupling needs dim >= 2");
        assert!(k >= 1 && range > 0.0);
        let split = dim.div_ceil(2);
        let (cols, rows) = if reversed { (dim - split, split) } else { (split, dim - split) };
        CouplingLayer {
            dim,
            split,
            reversed,
            k,
            range,
            clamp,
            scale: FourierFeatures::new(k, rows, cols, scale.0, scale.1),
            shift: FourierFeatures::new(k, rows, cols, shift.0, shift.1),
        }
    }

    pub fn identity(dim: usize, reversed: bool, k: usize, range: f64, clamp: Option<f64>) -> Self {
        let split = dim.div_ceil(2);
        let (cols, rows) = if reversed { (dim - split, split) } else { (split, dim - split) };
        let zeros = || (vec![0.0; k * rows * cols], vec![0.0; k * cols]);
        Self::new(dim, reversed, k, range, clamp, zeros(), zeros())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reversed(&self) -> bool {
        self.reversed
    }

    pub fn frequencies(&self) -> usize {
        self.k
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn clamp(&self) -> Option<f64> {
        self.clamp
    }

    pub fn set_clamp(&mut self, clamp: Option<f64>) {
        self.clamp = clamp;
    }

    pub fn scale_features(&self) -> &FourierFeatures {
        &self.scale
    }

    pub fn shift_features(&self) -> &FourierFeatures {
        &self.shift
    }

    /// `(conditioning, transformed)` coordinate ranges.
    pub fn halves(&self) -> (Range<usize>, Range<usize>) {
        if self.reversed {
            (self.split..self.dim, 0..self.split)
        } else {
            (0..self.split, self.split..self.dim)
        }
    }

    fn omega(&self) -> f64 {
        2.0 * PI / self.range
    }

    pub fn num_params(&self) -> usize {
        self.scale.num_params() + self.shift.num_params()
    }

    pub fn write_params(&self, out: &mut [f64]) {
        let ns = self.scale.num_params();
        self.scale.write_params(&mut out[..ns]);
        self.shift.write_params(&mut out[ns..]);
    }

    pub fn read_params(&mut self, src: &[f64]) {
        let ns = self.scale.num_params();
        self.scale.read_params(&src[..ns]);
        self.shift.read_params(&src[ns..]);
    }

    pub fn scratch(&self) -> CouplingScratch {
        let mut sc = CouplingScratch::default();
        let (c, t) = self.halves();
        sc.ensure(self.k, c.len(), t.len());
        sc
    }

    /// Length of the per-sample feature buffer.
    pub fn cache_len(&self) -> usize {
        let (c, t) = self.halves();
        4 * self.k * c.len() + 4 * t.len()
    }

    fn dims(&self) -> (usize, usize) {
        let (c, t) = self.halves();
        (self.k * c.len(), t.len())
    }

    /// Fills the feature buffer `buf` and `raw_s`, `raw_t`, `s` (plus the
    /// directional derivatives along `vc` when given) at conditioning input
    /// `xc`.
    fn features(&self, xc: &[f64], vc: Option<&[f64]>, buf: &mut [f64], sc: &mut CouplingScratch) {
        let (kc, rows) = self.dims();
        let mut f = feat_mut(buf, kc, rows);
        match (vc, self.dim == 2) {
            (Some(vc), true) => self.features_planar::<true>(xc[0], vc[0], &mut f, sc),
            (None, true) => self.features_planar::<false>(xc[0], 0.0, &mut f, sc),
            (Some(vc), false) => self.features_general::<true>(xc, vc, &mut f, sc),
            (None, false) => self.features_general::<false>(xc, xc, &mut f, sc),
        }
        for r in 0..rows {
            let raw = sc.raw_s[r];
            let s = match self.clamp {
                Some(m) => {
                    let t = (raw / m).tanh();
                    f.th[r] = t;
                    f.g[r] = 1.0 - t * t;
                    m * t
                }
                None => {
                    f.th[r] = 0.0;
                    f.g[r] = 1.0;
                    raw
                }
            };
            sc.s[r] = s;
            f.e[r] = s.exp();
        }
    }

    /// Features for one conditioning and one transformed coordinate.
    #[inline(always)]
    fn features_planar<const TANGENT: bool>(&self, x: f64, v: f64, f: &mut FeatMut<'_>, sc: &mut CouplingScratch) {
        let k = self.k;
        let omega = self.omega();
        let (ss, tt) = (&self.scale, &self.shift);
        let (ths, tht) = (&ss.theta[..k], &tt.theta[..k]);
        let (cps, sps) = (&ss.cos_phase[..k], &ss.sin_phase[..k]);
        let (cpt, spt) = (&tt.cos_phase[..k], &tt.sin_phase[..k]);
        let (cf_s, sf_s) = (&mut f.cf_s[..k], &mut f.sf_s[..k]);
        let (cf_t, sf_t) = (&mut f.cf_t[..k], &mut f.sf_t[..k]);
        // cos/sin of k * omega * x by the angle-addition recurrence
        let (s1, c1) = (omega * x).sin_cos();
        let (mut ck, mut sk) = (c1, s1);
        let (mut rs, mut rt, mut ds, mut dt) = (0.0, 0.0, 0.0, 0.0);
        for kk in 0..k {
            let a_s = ck * cps[kk] - sk * sps[kk];
            let b_s = sk * cps[kk] + ck * sps[kk];
            let a_t = ck * cpt[kk] - sk * spt[kk];
            let b_t = sk * cpt[kk] + ck * spt[kk];
            cf_s[kk] = a_s;
            sf_s[kk] = b_s;
            cf_t[kk] = a_t;
            sf_t[kk] = b_t;
            rs += ths[kk] * a_s;
            rt += tht[kk] * a_t;
            if TANGENT {
                let fk = (kk + 1) as f64;
                ds += fk * ths[kk] * b_s;
                dt += fk * tht[kk] * b_t;
            }
            let next_c = ck * c1 - sk * s1;
            sk = sk * c1 + ck * s1;
            ck = next_c;
        }
        sc.raw_s[0] = rs;
        sc.raw_t[0] = rt;
        if TANGENT {
            f.draw_s[0] = -omega * v * ds;
            sc.draw_t[0] = -omega * v * dt;
        }
    }

    #[inline(always)]
    fn features_general<const TANGENT: bool>(&self, xc: &[f64], vc: &[f64], f: &mut FeatMut<'_>, sc: &mut CouplingScratch) {
        let cols = xc.len();
        let rows = self.dim - cols;
        let k = self.k;
        let kc = k * cols;
        let omega = self.omega();
        let (ss, tt) = (&self.scale, &self.shift);
        let (ths, tht) = (&ss.theta[..kc * rows], &tt.theta[..kc * rows]);
        let raw_s = &mut sc.raw_s[..rows];
        let raw_t = &mut sc.raw_t[..rows];
        let draw_s = &mut f.draw_s[..rows];
        let draw_t = &mut sc.draw_t[..rows];
        raw_s.fill(0.0);
        raw_t.fill(0.0);
        if TANGENT {
            draw_s.fill(0.0);
            draw_t.fill(0.0);
        }
        for c in 0..cols {
            let (s1, c1) = (omega * xc[c]).sin_cos();
            let (mut ck, mut sk) = (c1, s1);
            let vcc = if TANGENT { -omega * vc[c] } else { 0.0 };
            let p = c * k..(c + 1) * k;
            let (cps, sps) = (&ss.cos_phase[p.clone()], &ss.sin_phase[p.clone()]);
            let (cpt, spt) = (&tt.cos_phase[p.clone()], &tt.sin_phase[p.clone()]);
            let (cf_s, sf_s) = (&mut f.cf_s[p.clone()], &mut f.sf_s[p.clone()]);
            let (cf_t, sf_t) = (&mut f.cf_t[p.clone()], &mut f.sf_t[p]);
            let w = c * k * rows..(c + 1) * k * rows;
            let (ths, tht) = (&ths[w.clone()], &tht[w]);
            for kk in 0..k {
                let a_s = ck * cps[kk] - sk * sps[kk];
                let b_s = sk * cps[kk] + ck * sps[kk];
                let a_t = ck * cpt[kk] - sk * spt[kk];
                let b_t = sk * cpt[kk] + ck * spt[kk];
                cf_s[kk] = a_s;
                sf_s[kk] = b_s;
                cf_t[kk] = a_t;
                sf_t[kk] = b_t;
                let fk = vcc * (kk + 1) as f64;
                let ths = &ths[kk * rows..(kk + 1) * rows];
                let tht = &tht[kk * rows..(kk + 1) * rows];
                for r in 0..rows {
                    raw_s[r] += ths[r] * a_s;
                    raw_t[r] += tht[r] * a_t;
                    if TANGENT {
                        draw_s[r] += fk * ths[r] * b_s;
                        draw_t[r] += fk * tht[r] * b_t;
                    }
                }
                let next_c = ck * c1 - sk * s1;
                sk = sk * c1 + ck * s1;
                ck = next_c;
            }
        }
    }

    /// Features into the scratch's own buffer.
    fn features_scratch(&self, xc: &[f64], vc: Option<&[f64]>, sc: &mut CouplingScratch) {
        let mut buf = std::mem::take(&mut sc.feat);
        self.features(xc, vc, &mut buf, sc);
        sc.feat = buf;
    }

    /// Raw (unclamped) scale features at a conditioning input.
    pub fn raw_scale(&self, xc: &[f64]) -> Vec<f64> {
        let mut sc = self.scratch();
        self.features_scratch(xc, None, &mut sc);
        sc.raw_s[..self.dim - xc.len()].to_vec()
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64], sc: &mut CouplingScratch) {
        let (cr, tr) = self.halves();
        self.features_scratch(&x[cr.clone()], None, sc);
        y[cr.clone()].copy_from_slice(&x[cr]);
        for (r, i) in tr.enumerate() {
            y[i] = sc.s[r].exp() * x[i] + sc.raw_t[r];
        }
    }

    /// Value and JVP; the features land in `buf` (length
    /// [`CouplingLayer::cache_len`]). Returns the log-determinant.
    fn forward_tangent_into(&self, x: &[f64], v: &[f64], y: &mut [f64], w: &mut [f64], buf: &mut [f64], sc: &mut CouplingScratch) -> f64 {
        let (cr, tr) = self.halves();
        self.features(&x[cr.clone()], Some(&v[cr.clone()]), buf, sc);
        let (kc, rows) = self.dims();
        let f = feat(buf, kc, rows);
        y[cr.clone()].copy_from_slice(&x[cr.clone()]);
        w[cr.clone()].copy_from_slice(&v[cr]);
        let mut log_det = 0.0;
        for (r, i) in tr.enumerate() {
            let ds = f.g[r] * f.draw_s[r];
            y[i] = f.e[r] * x[i] + sc.raw_t[r];
            w[i] = f.e[r] * (ds * x[i] + v[i]) + sc.draw_t[r];
            log_det += sc.s[r];
        }
        log_det
    }

    pub fn forward_tangent(&self, x: &[f64], v: &[f64], y: &mut [f64], w: &mut [f64], sc: &mut CouplingScratch) {
        let mut buf = std::mem::take(&mut sc.feat);
        self.forward_tangent_into(x, v, y, w, &mut buf, sc);
        sc.feat = buf;
    }

    /// [`CouplingLayer::forward_tangent`] that keeps the features in `cache`
    /// for a later [`CouplingLayer::backward`]. Returns the log-determinant.
    pub(crate) fn forward_tangent_cached(
        &self,
        x: &[f64],
        v: &[f64],
        y: &mut [f64],
        w: &mut [f64],
        sc: &mut CouplingScratch,
        cache: &mut [f64],
    ) -> f64 {
        self.forward_tangent_into(x, v, y, w, cache, sc)
    }

    pub fn inverse(&self, y: &[f64], x: &mut [f64], sc: &mut CouplingScratch) {
        let (cr, tr) = self.halves();
        self.features_scratch(&y[cr.clone()], None, sc);
        x[cr.clone()].copy_from_slice(&y[cr]);
        for (r, i) in tr.enumerate() {
            x[i] = (y[i] - sc.raw_t[r]) * (-sc.s[r]).exp();
        }
    }

    pub fn log_det(&self, x: &[f64], sc: &mut CouplingScratch) -> f64 {
        let (cr, tr) = self.halves();
        self.features_scratch(&x[cr], None, sc);
        sc.s[..tr.len()].iter().sum()
    }

    /// Adjoints of `raw_s` and `draw_s` from those of `s` and
    /// `ds = g * draw_s`, including the clamp's curvature term.
    #[inline]
    fn raw_scale_adjoints(&self, f: &Feat<'_>, r: usize, s_bar: f64, ds_bar: f64, sc: &mut CouplingScratch) {
        let g = f.g[r];
        let mut raw_bar = s_bar * g;
        if let Some(m) = self.clamp {
            raw_bar += ds_bar * f.draw_s[r] * (-2.0 * f.th[r] * g / m);
        }
        sc.raw_s_bar[r] = raw_bar;
        sc.draw_s_bar[r] = ds_bar * g;
    }

    /// Reverse pass through `forward_tangent` plus `ld_bar * log_det`.
    /// `cache` holds the features from [`CouplingLayer::forward_tangent_cached`]
    /// at the same input; without it they are recomputed.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        v: &[f64],
        y_bar: &[f64],
        w_bar: &[f64],
        ld_bar: f64,
        x_bar: &mut [f64],
        v_bar: &mut [f64],
        grad: &mut [f64],
        sc: &mut CouplingScratch,
        cache: Option<&[f64]>,
    ) {
        match cache {
            Some(c) => self.backward_with(c, x, v, y_bar, w_bar, ld_bar, x_bar, v_bar, grad, sc),
            None => {
                let (cr, _) = self.halves();
                let mut buf = std::mem::take(&mut sc.feat);
                self.features(&x[cr.clone()], Some(&v[cr]), &mut buf, sc);
                self.backward_with(&buf, x, v, y_bar, w_bar, ld_bar, x_bar, v_bar, grad, sc);
                sc.feat = buf;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_with(
        &self,
        buf: &[f64],
        x: &[f64],
        v: &[f64],
        y_bar: &[f64],
        w_bar: &[f64],
        ld_bar: f64,
        x_bar: &mut [f64],
        v_bar: &mut [f64],
        grad: &mut [f64],
        sc: &mut CouplingScratch,
    ) {
        let (cr, tr) = self.halves();
        let (kc, rows) = self.dims();
        let f = feat(buf, kc, rows);
        x_bar[cr.clone()].copy_from_slice(&y_bar[cr.clone()]);
        v_bar[cr.clone()].copy_from_slice(&w_bar[cr.clone()]);
        for (r, i) in tr.enumerate() {
            let e = f.e[r];
            let ds = f.g[r] * f.draw_s[r];
            let (yb, wb) = (y_bar[i], w_bar[i]);
            let s_bar = yb * e * x[i] + wb * e * (ds * x[i] + v[i]) + ld_bar;
            let ds_bar = wb * e * x[i];
            x_bar[i] = yb * e + wb * e * ds;
            v_bar[i] = wb * e;
            sc.raw_t_bar[r] = yb;
            sc.draw_t_bar[r] = wb;
            self.raw_scale_adjoints(&f, r, s_bar, ds_bar, sc);
        }
        let omega = self.omega();
        let ns = self.scale.num_params();
        let (g_scale, g_shift) = grad.split_at_mut(ns);
        let vc = &v[cr.clone()];
        let (xc_bar, vc_bar) = (&mut x_bar[cr.clone()], &mut v_bar[cr]);
        self.scale.backward::<true>(
            f.cf_s,
            f.sf_s,
            &sc.raw_s_bar[..rows],
            &sc.draw_s_bar[..rows],
            vc,
            omega,
            xc_bar,
            vc_bar,
            g_scale,
        );
        self.shift.backward::<true>(
            f.cf_t,
            f.sf_t,
            &sc.raw_t_bar[..rows],
            &sc.draw_t_bar[..rows],
            vc,
            omega,
            xc_bar,
            vc_bar,
            g_shift,
        );
    }

    /// Reverse pass through `forward` plus `ld_bar * log_det`.
    pub fn backward_primal(
        &self,
        x: &[f64],
        y_bar: &[f64],
        ld_bar: f64,
        x_bar: &mut [f64],
        grad: &mut [f64],
        sc: &mut CouplingScratch,
    ) {
        let (cr, tr) = self.halves();
        self.features_scratch(&x[cr.clone()], None, sc);
        x_bar[cr.clone()].copy_from_slice(&y_bar[cr.clone()]);
        let (kc, rows) = self.dims();
        let buf = std::mem::take(&mut sc.feat);
        let f = feat(&buf, kc, rows);
        for (r, i) in tr.enumerate() {
            let e = f.e[r];
            let yb = y_bar[i];
            x_bar[i] = yb * e;
            sc.raw_t_bar[r] = yb;
            sc.raw_s_bar[r] = (yb * e * x[i] + ld_bar) * f.g[r];
        }
        self.feature_backward_primal(&f, &mut x_bar[cr], grad, sc);
        sc.feat = buf;
    }

    /// Reverse pass through `inverse`; `x` is the inverse's output.
    pub fn backward_inverse(
        &self,
        y: &[f64],
        x: &[f64],
        x_bar: &[f64],
        y_bar: &mut [f64],
        grad: &mut [f64],
        sc: &mut CouplingScratch,
    ) {
        let (cr, tr) = self.halves();
        self.features_scratch(&y[cr.clone()], None, sc);
        y_bar[cr.clone()].copy_from_slice(&x_bar[cr.clone()]);
        let (kc, rows) = self.dims();
        let buf = std::mem::take(&mut sc.feat);
        let f = feat(&buf, kc, rows);
        for (r, i) in tr.enumerate() {
            let inv_e = 1.0 / f.e[r];
            let xb = x_bar[i];
            y_bar[i] = xb * inv_e;
            sc.raw_t_bar[r] = -xb * inv_e;
            sc.raw_s_bar[r] = -xb * x[i] * f.g[r];
        }
        self.feature_backward_primal(&f, &mut y_bar[cr], grad, sc);
        sc.feat = buf;
    }

    fn feature_backward_primal(&self, f: &Feat<'_>, xc_bar: &mut [f64], grad: &mut [f64], sc: &mut CouplingScratch) {
        let omega = self.omega();
        let rows = self.dims().1;
        let ns = self.scale.num_params();
        let (g_scale, g_shift) = grad.split_at_mut(ns);
        let mut none: [f64; 0] = [];
        self.scale.backward::<false>(
            f.cf_s,
            f.sf_s,
            &sc.raw_s_bar[..rows],
            &[],
            &[],
            omega,
            xc_bar,
            &mut none,
            g_scale,
        );
        self.shift.backward::<false>(
            f.cf_t,
            f.sf_t,
            &sc.raw_t_bar[..rows],
            &[],
            &[],
            omega,
            xc_bar,
            &mut none,
            g_shift,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_only_closed_form() {
        // d = 2, K = 1, Theta_t = [[c]], zero phase, zero scale
        let c = 0.7;
        let range = 10.0;
        let layer = CouplingLayer::new(2, false, 1, range, None, (vec![0.0], vec![0.0]), (vec![c], vec![0.0]));
        let mut sc = layer.scratch();
        for x in [[0.3, -1.2], [2.5, 0.0], [-4.0, 3.3]] {
            let mut y = [0.0; 2];
            layer.forward(&x, &mut y, &mut sc);
            let want = x[1] + c * (2.0 * PI / range * x[0]).cos();
            assert_eq!(y[0], x[0]);
            assert!((y[1] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn harmonic_recurrence_matches_direct_cosines() {
        let k = 5;
        let theta: Vec<f64> = (0..k).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let phase: Vec<f64> = (0..k).map(|i| 0.3 * i as f64).collect();
        let layer = CouplingLayer::new(2, false, k, 10.0, None, (vec![0.0; k], vec![0.0; k]), (theta.clone(), phase.clone()));
        let mut sc = layer.scratch();
        let x = [1.37, 0.0];
        let mut y = [0.0; 2];
        layer.forward(&x, &mut y, &mut sc);
        let omega = 2.0 * PI / 10.0;
        let direct: f64 = (0..k).map(|i| theta[i] * (omega * (i + 1) as f64 * x[0] + phase[i]).cos()).sum();
        assert!((y[1] - direct).abs() < 1e-13);
    }

    #[test]
    fn odd_dim_split() {
        let layer = CouplingLayer::identity(5, false, 3, 10.0, None);
        assert_eq!(layer.halves(), (0..3, 3..5));
        let rev = CouplingLayer::identity(5, true, 3, 10.0, None);
        assert_eq!(rev.halves(), (3..5, 0..3));
        assert_eq!(layer.num_params(), 2 * (3 * 2 * 3 + 3 * 3));
        assert_eq!(rev.num_params(), 2 * (3 * 3 * 2 + 3 * 2));
    }

    #[test]
    fn scale_output_bounded() {
        let mut rng = crate::rng::rng_from_seed(3);
        use rand::Rng;
        let k = 4;
        let (rows, cols) = (2, 3);
        let theta: Vec<f64> = (0..k * rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phase: Vec<f64> = (0..k * cols).map(|_| rng.random_range(0.0..6.0)).collect();
        let layer = CouplingLayer::new(5, false, k, 10.0, None, (theta, phase), (vec![0.0; k * rows * cols], vec![0.0; k * cols]));
        let bound = layer.scale_features().output_bound();
        for _ in 0..500 {
            let xc: Vec<f64> = (0..cols).map(|_| rng.random_range(-50.0..50.0)).collect();
            let raw = layer.raw_scale(&xc);
            assert!(raw.iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }
}
