use super::params::{ParamId, ParamSet};
use super::rng::RngStream;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Every scalar coordinate of every parameter.
pub fn all_coords(params: &ParamSet<f64>) -> Vec<(ParamId, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (ParamId(i), j)))
        .collect()
}

/// `count` coordinates drawn uniformly over all scalars (with replacement).
pub fn sample_coords(params: &ParamSet<f64>, count: usize, rng: &mut RngStream) -> Vec<(ParamId, usize)> {
    let all = all_coords(params);
    (0..count)
        .map(|_| all[rng.below(all.len() as u64) as usize])
        .collect()
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences `(f(x+h) - f(x-h)) / 2h` at the given coordinates.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    f: F,
    coords: &[(ParamId, usize)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)
    };
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(ps);
        let loss = f(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance,
    };
    for &(id, j) in coords {
        let orig = work.value(id).data()[j];
        work.get_mut(id).value.data_mut()[j] = orig + step;
        let plus = eval(&work)?;
        work.get_mut(id).value.data_mut()[j] = orig - step;
        let minus = eval(&work)?;
        work.get_mut(id).value.data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
        let err = rel_err(a, numeric);
        report.checked += 1;
        if err > tolerance {
            report.failures += 1;
        }
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((params.get(id).name.clone(), j));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{BinaryMask, Tensor};

    fn params_with(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        for (n, t) in entries {
            ps.add(*n, t.clone()).unwrap();
        }
        ps
    }

    #[test]
    fn matmul_sum_gradient_is_row_sums_of_b() {
        let a = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.7]]);
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]]);
        let ps = params_with(&[("a", a), ("b", b.clone())]);
        let mut tape = Tape::new(&ps);
        let (va, vb) = (tape.param(ParamId(0)), tape.param(ParamId(1)));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(&[c]).unwrap();
        let g = tape.backward(s);
        // d sum(AB) / dA[i][k] = sum_j B[k][j]
        let row_sums: Vec<f64> = (0..3).map(|k| b.row(k).iter().sum()).collect();
        let ga = g.get(ParamId(0)).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                assert!((ga.get(i, k) - row_sums[k]).abs() < 1e-12);
            }
        }
        let report = grad_check(
            &ps,
            |t| {
                let (va, vb) = (t.param(ParamId(0)), t.param(ParamId(1)));
                let c = t.matmul(va, vb)?;
                t.sum(&[c])
            },
            &all_coords(&ps),
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn two_layer_network_passes() {
        let mut rng = RngStream::new(11);
        let ps = params_with(&[
            ("w1", crate::numerics::init_projection(4, 6, &mut rng)),
            ("b1", crate::numerics::init_normal(&[6], 0.1, &mut rng)),
            ("g", Tensor::full(&[6], 1.0)),
            ("beta", Tensor::zeros(&[6])),
            ("w2", crate::numerics::init_projection(6, 5, &mut rng)),
        ]);
        let x = crate::numerics::init_normal::<f64>(&[3, 4], 1.0, &mut rng);
        let report = grad_check(
            &ps,
            |t| {
                let xi = t.constant(x.clone());
                let ids: Vec<_> = (0..5).map(|i| t.param(ParamId(i))).collect();
                let h = t.matmul(xi, ids[0])?;
                let h = t.add_row(h, ids[1])?;
                let h = t.gelu(h)?;
                let h = t.layer_norm(h, ids[2], ids[3], 1e-5)?;
                let logits = t.matmul(h, ids[4])?;
                t.cross_entropy(logits, &[0, 3, 4])
            },
            &all_coords(&ps),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn attention_and_softmax_gradients() {
        let mut rng = RngStream::new(5);
        let ps = params_with(&[
            ("q", crate::numerics::init_normal(&[3, 4], 1.0, &mut rng)),
            ("k", crate::numerics::init_normal(&[5, 4], 1.0, &mut rng)),
            ("v", crate::numerics::init_normal(&[5, 4], 1.0, &mut rng)),
            ("s", crate::numerics::init_normal(&[3, 5], 1.0, &mut rng)),
        ]);
        let mask = BinaryMask::from_rows(&[vec![1, 0, 1, 0, 0], vec![1, 1, 1, 1, 0], vec![0, 0, 0, 0, 1]]);
        let target = crate::numerics::init_normal::<f64>(&[3, 4], 1.0, &mut rng);
        let proj = crate::numerics::init_normal::<f64>(&[5, 2], 1.0, &mut rng);
        let report = grad_check(
            &ps,
            |t| {
                let ids: Vec<_> = (0..4).map(|i| t.param(ParamId(i))).collect();
                let a = t.attention(ids[0], ids[1], ids[2], &mask, 2, None)?;
                let w = t.constant(target.clone());
                let prod = t.matmul_nt(a, w)?;
                let sm = t.masked_softmax(ids[3], &mask)?;
                let sm2 = t.scale(sm, 3.0)?;
                let pj = t.constant(proj.clone());
                let sm2 = t.matmul(sm2, pj)?;
                let x = t.embedding(ids[2], &[4, 0, 4])?;
                let y = t.concat_rows(&[x, a])?;
                let yy = t.matmul_nt(y, y)?;
                t.sum(&[prod, sm2, yy])
            },
            &all_coords(&ps),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
