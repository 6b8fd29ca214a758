//! Dense matrix exponential and the Van Loan block integral.
//!
//! The exponential uses scaling and squaring around a diagonal Padé
//! approximant whose degree (3, 5, 7, 9 or 13) is picked from the 1-norm,
//! following Higham's 2005 thresholds. Matrices here are small (p ≤ ~30),
//! so everything is dense.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense square matrix used for sub-intensity matrices and their exponentials.
pub type SquareMatrix = DMatrix<f64>;

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn check_square(a: &SquareMatrix, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::InvalidMatrix(format!(
            "{what} must be square and non-empty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Maximum absolute column sum.
pub fn norm1(a: &SquareMatrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// True when all off-diagonal entries are nonnegative, in which case the
/// exponential is entrywise nonnegative.
fn is_metzler(a: &SquareMatrix) -> bool {
    let n = a.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || a[(i, j)] >= 0.0))
}

/// `e^{A t}`.
pub fn expm(a: &SquareMatrix, t: f64) -> Result<SquareMatrix> {
    check_square(a, "A")?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidMatrix(format!("time must be finite and nonnegative, got {t}")));
    }
    let scaled = a * t;
    let mut e = expm_unchecked(&scaled)?;
    if is_metzler(a) {
        e.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
    }
    Ok(e)
}

fn expm_unchecked(a: &SquareMatrix) -> Result<SquareMatrix> {
    let n = a.nrows();
    if n == 1 {
        return Ok(SquareMatrix::from_element(1, 1, a[(0, 0)].exp()));
    }
    let norm = norm1(a);
    if norm == 0.0 {
        return Ok(SquareMatrix::identity(n, n));
    }
    let ident = SquareMatrix::identity(n, n);
    let a2 = a * a;

    let low_order = [
        (THETA_3, &PADE_3[..]),
        (THETA_5, &PADE_5[..]),
        (THETA_7, &PADE_7[..]),
        (THETA_9, &PADE_9[..]),
    ];
    for (theta, coef) in low_order {
        if norm <= theta {
            return pade_low(a, &a2, &ident, coef);
        }
    }

    let squarings = ((norm / THETA_13).log2().ceil()).max(0.0) as i32;
    let scale = 2f64.powi(-squarings);
    let a_s = a * scale;
    let a2_s = &a2 * (scale * scale);
    let mut r = pade_13(&a_s, &a2_s, &ident)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low(
    a: &SquareMatrix,
    a2: &SquareMatrix,
    ident: &SquareMatrix,
    b: &[f64],
) -> Result<SquareMatrix> {
    let mut power = ident.clone();
    let mut u = ident * b[1];
    let mut v = ident * b[0];
    for k in 1..b.len() / 2 {
        power = &power * a2;
        v += &power * b[2 * k];
        u += &power * b[2 * k + 1];
    }
    let u = a * u;
    solve_pade(&u, &v)
}

fn pade_13(a: &SquareMatrix, a2: &SquareMatrix, ident: &SquareMatrix) -> Result<SquareMatrix> {
    let b = &PADE_13;
    let a4 = a2 * a2;
    let a6 = &a4 * a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + a2 * b[3] + ident * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + a2 * b[2] + ident * b[0];
    solve_pade(&u, &v)
}

fn solve_pade(u: &SquareMatrix, v: &SquareMatrix) -> Result<SquareMatrix> {
    let denom = v - u;
    let numer = v + u;
    denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::InvalidMatrix("singular Padé denominator".into()))
}

/// Van Loan block exponential.
///
/// Exponentiates `[[T, B], [0, T]] · dt` and returns the diagonal block
/// `E = e^{T dt}` and the coupling block `C = ∫₀^{dt} e^{T(dt-u)} B e^{T u} du`.
pub fn vanloan_integral(
    t: &SquareMatrix,
    b: &SquareMatrix,
    dt: f64,
) -> Result<(SquareMatrix, SquareMatrix)> {
    check_square(t, "T")?;
    check_square(b, "B")?;
    if t.nrows() != b.nrows() {
        return Err(Error::InvalidMatrix(format!(
            "dimension mismatch: T is {p}x{p}, B is {q}x{q}",
            p = t.nrows(),
            q = b.nrows()
        )));
    }
    let p = t.nrows();
    let mut g = SquareMatrix::zeros(2 * p, 2 * p);
    g.view_mut((0, 0), (p, p)).copy_from(t);
    g.view_mut((p, p), (p, p)).copy_from(t);
    g.view_mut((0, p), (p, p)).copy_from(b);
    let big = expm(&g, dt)?;
    let e = big.view((0, 0), (p, p)).into_owned();
    let c = big.view((0, p), (p, p)).into_owned();
    Ok((e, c))
}
