//! Small dense linear-algebra helpers shared by the probabilistic modules.

use nalgebra::{DMatrix, DVector};

pub type Point = DVector<f64>;
pub type Cov = DMatrix<f64>;

/// Symmetrizes `m` and lifts eigenvalues below `floor` up to `floor`.
///
/// Matrices that are already symmetric with spectrum above the floor come back
/// unchanged apart from the symmetrization round-off.
pub fn symmetrize_clamp(m: &Cov, floor: f64) -> Cov {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    (&out + out.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Cov) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_asymmetry(m: &Cov) -> f64 {
    (m - m.transpose()).amax()
}

/// Condition estimate of a symmetric matrix from its spectrum.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn lerp(a: &Point, b: &Point, frac: f64) -> Point {
    if frac == 0.0 {
        return a.clone();
    }
    a + (b - a) * frac
}

pub fn lerp_mat(a: &Cov, b: &Cov, frac: f64) -> Cov {
    if frac == 0.0 {
        return a.clone();
    }
    a + (b - a) * frac
}

pub(crate) mod serde_point {
    use super::Point;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Point, s: S) -> Result<S::Ok, S::Error> {
        p.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Point, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok(Point::from_vec(v))
    }
}

pub(crate) mod serde_points {
    use super::Point;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &[Point], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = p.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point>, D::Error> {
        let v = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(Point::from_vec).collect())
    }
}

/// Row-major nested arrays, `[[a, b], [c, d]]`.
pub(crate) mod serde_cov {
    use super::Cov;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Cov) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Cov, String> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err("covariance must be square".into());
        }
        Ok(Cov::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Cov, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Cov, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?).map_err(D::Error::custom)
    }
}

pub(crate) mod serde_covs {
    use super::{serde_cov, Cov};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &[Cov], s: S) -> Result<S::Ok, S::Error> {
        let all: Vec<_> = m.iter().map(serde_cov::to_rows).collect();
        all.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Cov>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .into_iter()
            .map(|r| serde_cov::from_rows(r).map_err(D::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_lifts_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let c = symmetrize_clamp(&m, 0.0);
        assert!(min_eigenvalue(&c) >= -1e-12);
        assert!(max_asymmetry(&c) == 0.0);
    }

    #[test]
    fn clamp_leaves_spd_alone() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(symmetrize_clamp(&m, 0.0), m);
    }
}
