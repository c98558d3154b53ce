//! Separable bilinear resampling with half-pixel centers and clamped edges.

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    t: f64,
}

#[derive(Debug, Clone)]
pub struct Bilinear {
    in_res: usize,
    out_res: usize,
    taps: Vec<Tap>,
}

impl Bilinear {
    pub fn new(in_res: usize, out_res: usize) -> Self {
        let scale = in_res as f64 / out_res as f64;
        let max = (in_res - 1) as f64;
        let taps = (0..out_res)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_res - 1);
                Tap { i0, i1, t: src - i0 as f64 }
            })
            .collect();
        Bilinear { in_res, out_res, taps }
    }

    pub fn in_res(&self) -> usize {
        self.in_res
    }

    pub fn out_res(&self) -> usize {
        self.out_res
    }

    /// Resamples one `in_res x in_res` plane into `out`.
    pub fn apply_into(&self, src: &[f64], out: &mut [f64]) {
        if self.in_res == self.out_res {
            out.copy_from_slice(src);
            return;
        }
        let rows = self.rows(src);
        let m = self.out_res;
        for (o, tap) in out.chunks_exact_mut(m).zip(&self.taps) {
            let (a, b) = (&rows[tap.i0 * m..(tap.i0 + 1) * m], &rows[tap.i1 * m..(tap.i1 + 1) * m]);
            let (wa, wb) = (1.0 - tap.t, tap.t);
            for ((o, a), b) in o.iter_mut().zip(a).zip(b) {
                *o = a * wa + b * wb;
            }
        }
    }

    /// `out += scale * resample(src)`.
    pub fn add_scaled_into(&self, src: &[f64], scale: f64, out: &mut [f64]) {
        if self.in_res == self.out_res {
            for (o, v) in out.iter_mut().zip(src) {
                *o += scale * v;
            }
            return;
        }
        let rows = self.rows(src);
        let m = self.out_res;
        for (o, tap) in out.chunks_exact_mut(m).zip(&self.taps) {
            let (a, b) = (&rows[tap.i0 * m..(tap.i0 + 1) * m], &rows[tap.i1 * m..(tap.i1 + 1) * m]);
            let (wa, wb) = (scale * (1.0 - tap.t), scale * tap.t);
            for ((o, a), b) in o.iter_mut().zip(a).zip(b) {
                *o += a * wa + b * wb;
            }
        }
    }

    /// Horizontal pass: `in_res` rows of `out_res` samples.
    fn rows(&self, src: &[f64]) -> Vec<f64> {
        let n = self.in_res;
        let mut rows = Vec::with_capacity(n * self.out_res);
        for row in src.chunks_exact(n) {
            rows.extend(self.taps.iter().map(|tap| row[tap.i0] * (1.0 - tap.t) + row[tap.i1] * tap.t));
        }
        rows
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_res * self.out_res];
        self.apply_into(src, &mut out);
        out
    }

    /// Adjoint of [`Bilinear::apply`]: maps an output-space gradient back to
    /// the input plane.
    pub fn transpose(&self, grad: &[f64]) -> Vec<f64> {
        let (n, m) = (self.in_res, self.out_res);
        if n == m {
            return grad.to_vec();
        }
        let mut rows = vec![0.0; n * m];
        for (g, tap) in grad.chunks_exact(m).zip(&self.taps) {
            let (wa, wb) = (1.0 - tap.t, tap.t);
            for (r, v) in rows[tap.i0 * m..(tap.i0 + 1) * m].iter_mut().zip(g) {
                *r += v * wa;
            }
            for (r, v) in rows[tap.i1 * m..(tap.i1 + 1) * m].iter_mut().zip(g) {
                *r += v * wb;
            }
        }
        let mut out = vec![0.0; n * n];
        for (o, row) in out.chunks_exact_mut(n).zip(rows.chunks_exact(m)) {
            for (v, tap) in row.iter().zip(&self.taps) {
                o[tap.i0] += v * (1.0 - tap.t);
                o[tap.i1] += v * tap.t;
            }
        }
        out
    }
}
