//! SVD with a reconstruction check.
//!
//! nalgebra's default stopping rule occasionally returns a factorisation
//! that does not reproduce the input on matrices with repeated rows, so
//! each attempt is verified and a stricter or transposed decomposition is
//! tried when it fails.

use nalgebra::{DMatrix, SVD};

type Svd = SVD<f64, nalgebra::Dyn, nalgebra::Dyn>;

fn error(svd: &Svd, m: &DMatrix<f64>) -> f64 {
    svd.clone().recompose().map_or(f64::INFINITY, |r| (r - m).amax())
}

fn transposed(m: &DMatrix<f64>) -> Option<Svd> {
    let t = m.transpose().try_svd(true, true, f64::EPSILON, 0)?;
    Some(SVD { u: t.v_t.map(|v| v.transpose()), v_t: t.u.map(|u| u.transpose()), singular_values: t.singular_values })
}

/// Full SVD of `m` whose recomposition matches `m` to `1e-12` relative
/// accuracy, falling back to the best attempt.
pub(crate) fn svd(m: &DMatrix<f64>) -> Svd {
    let tol = 1e-12 * m.amax().max(1.0);
    let mut best: Option<(f64, Svd)> = None;
    let attempts: [&dyn Fn() -> Option<Svd>; 3] = [
        &|| m.clone().try_svd(true, true, f64::EPSILON, 0),
        &|| transposed(m),
        &|| Some(m.clone().svd(true, true)),
    ];
    for attempt in attempts {
        if let Some(s) = attempt() {
            let e = error(&s, m);
            if e <= tol {
                return s;
            }
            if best.as_ref().is_none_or(|(b, _)| e < *b) {
                best = Some((e, s));
            }
        }
    }
    best.expect("at least one decomposition").1
}
