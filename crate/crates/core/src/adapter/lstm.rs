use nalgebra::{DMatrix, DVector};

/// One LSTM direction. Gate blocks are stacked `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

pub(crate) struct Step {
    x: DVector<f64>,
    h_prev: DVector<f64>,
    c_prev: DVector<f64>,
    i: DVector<f64>,
    f: DVector<f64>,
    g: DVector<f64>,
    o: DVector<f64>,
    tanh_c: DVector<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: DMatrix::zeros(4 * hidden, input),
            u: DMatrix::zeros(4 * hidden, hidden),
            b: DMatrix::zeros(4 * hidden, 1),
        }
    }

    /// Runs over `xs` from zero state; returns the final hidden state and the
    /// tape needed by [`Lstm::backward`].
    pub(crate) fn forward(&self, xs: &[DVector<f64>]) -> (DVector<f64>, Vec<Step>) {
        let h_dim = self.hidden();
        let mut h = DVector::zeros(h_dim);
        let mut c = DVector::zeros(h_dim);
        let mut tape = Vec::with_capacity(xs.len());
        for x in xs {
            let z = &self.w * x + &self.u * &h + self.b.column(0);
            let i = z.rows(0, h_dim).map(sigmoid);
            let f = z.rows(h_dim, h_dim).map(sigmoid);
            let g = z.rows(2 * h_dim, h_dim).map(f64::tanh);
            let o = z.rows(3 * h_dim, h_dim).map(sigmoid);
            let c_new = f.component_mul(&c) + i.component_mul(&g);
            let tanh_c = c_new.map(f64::tanh);
            let h_new = o.component_mul(&tanh_c);
            tape.push(Step {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                i,
                f,
                g,
                o,
                tanh_c,
            });
            h = h_new;
            c = c_new;
        }
        (h, tape)
    }

    /// Backpropagates `dh` at the final state. Accumulates parameter
    /// gradients into `grad` and returns the gradient for each input.
    pub(crate) fn backward(
        &self,
        tape: &[Step],
        dh_final: &DVector<f64>,
        grad: &mut Lstm,
    ) -> Vec<DVector<f64>> {
        let h_dim = self.hidden();
        let mut dh = dh_final.clone();
        let mut dc = DVector::zeros(h_dim);
        let mut dxs = vec![DVector::zeros(self.w.ncols()); tape.len()];
        for (s, st) in tape.iter().enumerate().rev() {
            let d_o = dh.component_mul(&st.tanh_c);
            let dc_total = &dc
                + dh.component_mul(&st.o)
                    .component_mul(&st.tanh_c.map(|t| 1.0 - t * t));
            let di = dc_total.component_mul(&st.g);
            let dg = dc_total.component_mul(&st.i);
            let df = dc_total.component_mul(&st.c_prev);
            dc = dc_total.component_mul(&st.f);
            let mut dz = DVector::zeros(4 * h_dim);
            for k in 0..h_dim {
                dz[k] = di[k] * st.i[k] * (1.0 - st.i[k]);
                dz[h_dim + k] = df[k] * st.f[k] * (1.0 - st.f[k]);
                dz[2 * h_dim + k] = dg[k] * (1.0 - st.g[k] * st.g[k]);
                dz[3 * h_dim + k] = d_o[k] * st.o[k] * (1.0 - st.o[k]);
            }
            grad.w += &dz * st.x.transpose();
            grad.u += &dz * st.h_prev.transpose();
            grad.b += &dz;
            dxs[s] = self.w.transpose() * &dz;
            dh = self.u.transpose() * &dz;
        }
        dxs
    }
}
