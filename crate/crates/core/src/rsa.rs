//! Linear centered kernel alignment between representations.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::policy::finish_csv;

const MIN_NORM: f64 = 1e-30;

/// Similarity of one pair of representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaResult {
    pub a: String,
    pub b: String,
    pub cka: f64,
}

fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    let n = x.nrows() as f64;
    for mut col in c.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    c
}

fn check_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    if a.nrows() < 2 {
        return Err(Error::InsufficientData("CKA needs at least 2 rows".into()));
    }
    Ok(())
}

fn ratio(cross: f64, norm_a: f64, norm_b: f64) -> Result<f64> {
    if norm_a < MIN_NORM || norm_b < MIN_NORM {
        return Err(Error::UndefinedSimilarity(
            "representation is constant after centering".into(),
        ));
    }
    Ok(cross / (norm_a * norm_b))
}

/// Feature-space evaluation: ‖BᵀA‖²_F / (‖AᵀA‖_F ‖BᵀB‖_F).
pub fn linear_cka_direct(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (center_columns(a), center_columns(b));
    let cross = (b.transpose() * &a).norm_squared();
    ratio(cross, (a.transpose() * &a).norm(), (b.transpose() * &b).norm())
}

/// Stimulus-space evaluation via the n×n Gram matrices, ⟨K, L⟩ / (‖K‖ ‖L‖).
pub fn linear_cka_gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (center_columns(a), center_columns(b));
    let k = &a * a.transpose();
    let l = &b * b.transpose();
    ratio(k.dot(&l), k.norm(), l.norm())
}

/// Linear CKA, switching to the Gram form when features outnumber rows.
pub fn linear_cka(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols().max(b.ncols()) > a.nrows() {
        linear_cka_gram(a, b)
    } else {
        linear_cka_direct(a, b)
    }
}

/// Symmetric CKA matrix over named representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CkaMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.values[i][j])
    }

    /// Upper triangle (including the diagonal) as pair records.
    pub fn results(&self) -> Vec<CkaResult> {
        let mut out = Vec::new();
        for i in 0..self.names.len() {
            for j in i..self.names.len() {
                out.push(CkaResult {
                    a: self.names[i].clone(),
                    b: self.names[j].clone(),
                    cka: self.values[i][j],
                });
            }
        }
        out
    }

    /// Square CSV with a name header row and a name first column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }
}

/// Row-aligns every representation to the stimulus order of the first one.
fn aligned(reps: &[(String, EmbeddingMatrix)]) -> Result<Vec<DMatrix<f64>>> {
    let Some((_, first)) = reps.first() else {
        return Ok(Vec::new());
    };
    let ids = first.stimulus_ids();
    reps.iter()
        .map(|(name, e)| e.aligned_to(ids).map_err(|err| err.in_representation(name)))
        .collect()
}

fn checked_names(reps: &[(String, EmbeddingMatrix)]) -> Result<Vec<String>> {
    let names: Vec<String> = reps.iter().map(|(n, _)| n.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate representation name '{}'", w[0])));
    }
    Ok(names)
}

/// All pairwise similarities; the diagonal is exactly 1.
pub fn pairwise_cka(reps: &[(String, EmbeddingMatrix)]) -> Result<CkaMatrix> {
    let names = checked_names(reps)?;
    let mats = aligned(reps)?;
    let m = mats.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let cka: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| linear_cka(&mats[i], &mats[j]))
        .collect::<Result<_>>()?;
    let mut values = vec![vec![1.0; m]; m];
    for (&(i, j), v) in pairs.iter().zip(cka) {
        values[i][j] = v;
        values[j][i] = v;
    }
    for (i, mat) in mats.iter().enumerate() {
        // degenerate representations still have to fail on the diagonal
        linear_cka(mat, mat).map_err(|e| e.in_representation(&names[i]))?;
    }
    Ok(CkaMatrix { names, values })
}

/// CKA(anchor, R) − CKA(b, R) for one representation R and one reference b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaDifference {
    pub representation: String,
    pub reference: String,
    pub cka_anchor: f64,
    pub cka_reference: f64,
    pub difference: f64,
}

/// Positive differences mean R sits closer to the anchor than to the reference.
pub fn cka_difference(
    anchor: &(String, EmbeddingMatrix),
    references: &[(String, EmbeddingMatrix)],
    others: &[(String, EmbeddingMatrix)],
) -> Result<Vec<CkaDifference>> {
    let mut all = vec![anchor.clone()];
    all.extend(references.iter().cloned());
    all.extend(others.iter().cloned());
    let mats = aligned(&all)?;
    let a = &mats[0];
    let refs = &mats[1..=references.len()];
    let rest = &mats[references.len() + 1..];
    let rows: Vec<Vec<CkaDifference>> = others
        .par_iter()
        .zip(rest.par_iter())
        .map(|((name, _), r)| {
            let cka_anchor = linear_cka(a, r).map_err(|e| e.in_representation(name))?;
            references
                .iter()
                .zip(refs)
                .map(|((ref_name, _), b)| {
                    let cka_reference = linear_cka(b, r).map_err(|e| e.in_representation(name))?;
                    Ok(CkaDifference {
                        representation: name.clone(),
                        reference: ref_name.clone(),
                        cka_anchor,
                        cka_reference,
                        difference: cka_anchor - cka_reference,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn differences_to_csv(rows: &[CkaDifference]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["representation", "reference", "cka_anchor", "cka_reference", "difference"])?;
    for r in rows {
        w.write_record([
            r.representation.clone(),
            r.reference.clone(),
            r.cka_anchor.to_string(),
            r.cka_reference.to_string(),
            r.difference.to_string(),
        ])?;
    }
    finish_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn named(name: &str, m: DMatrix<f64>) -> (String, EmbeddingMatrix) {
        let ids = (0..m.nrows()).map(|i| format!("s{i}")).collect();
        let feats = (0..m.ncols()).map(|j| format!("f{j}")).collect();
        (name.into(), EmbeddingMatrix::new(ids, feats, m).unwrap())
    }

    #[test]
    fn self_similarity_is_one() {
        let a = gaussian(12, 5, 1);
        assert!((linear_cka(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let wide = gaussian(6, 40, 2);
        assert!((linear_cka(&wide, &wide).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_elementwise_formula() {
        let a = gaussian(10, 3, 3);
        let b = gaussian(10, 4, 4);
        let got = linear_cka(&a, &b).unwrap();
        let center = |m: &DMatrix<f64>| {
            let mut c = vec![vec![0.0; m.ncols()]; m.nrows()];
            for j in 0..m.ncols() {
                let mean: f64 = (0..m.nrows()).map(|i| m[(i, j)]).sum::<f64>() / m.nrows() as f64;
                for i in 0..m.nrows() {
                    c[i][j] = m[(i, j)] - mean;
                }
            }
            c
        };
        let (ca, cb) = (center(&a), center(&b));
        let inner = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            let mut s = 0.0;
            for p in 0..x[0].len() {
                for q in 0..y[0].len() {
                    let v: f64 = (0..x.len()).map(|i| x[i][p] * y[i][q]).sum();
                    s += v * v;
                }
            }
            s
        };
        let want = inner(&cb, &ca) / (inner(&ca, &ca).sqrt() * inner(&cb, &cb).sqrt());
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn constant_representation_is_an_error() {
        let a = DMatrix::from_element(5, 2, 3.0);
        let b = gaussian(5, 2, 5);
        assert!(matches!(linear_cka(&a, &b), Err(Error::UndefinedSimilarity(_))));
        assert!(matches!(linear_cka(&b, &b.rows(0, 4).into_owned()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pairwise_matches_individual_calls() {
        let reps = vec![
            named("x", gaussian(15, 3, 6)),
            named("y", gaussian(15, 20, 7)),
            named("z", gaussian(15, 4, 8)),
        ];
        let m = pairwise_cka(&reps).unwrap();
        for (i, (_, a)) in reps.iter().enumerate() {
            assert_eq!(m.values[i][i], 1.0);
            for (j, (_, b)) in reps.iter().enumerate().filter(|&(j, _)| j != i) {
                let want = linear_cka(a.values(), b.values()).unwrap();
                assert!((m.values[i][j] - want).abs() < 1e-14);
            }
        }
        assert_eq!(m.get("x", "z"), m.get("z", "x"));
        assert_eq!(m.results().len(), 6);
        assert!(m.to_csv().unwrap().starts_with(",x,y,z\n"));
    }

    #[test]
    fn pairwise_aligns_rows_by_id() {
        let a = gaussian(8, 3, 9);
        let (_, e) = named("a", a.clone());
        let mut ids: Vec<String> = e.stimulus_ids().to_vec();
        ids.reverse();
        let flipped = DMatrix::from_fn(8, 3, |i, j| a[(7 - i, j)]);
        let rev = EmbeddingMatrix::new(ids, e.feature_names().to_vec(), flipped).unwrap();
        let m = pairwise_cka(&[("a".into(), e), ("rev".into(), rev)]).unwrap();
        assert!((m.values[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn difference_signs() {
        let anchor = named("anchor", gaussian(20, 5, 10));
        let b = named("b", gaussian(20, 6, 11));
        let other = named("other", gaussian(20, 7, 12));
        let rows = cka_difference(&anchor, &[b.clone()], &[anchor.clone(), b.clone(), other.clone()]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].difference > 0.0);
        assert!((rows[0].cka_anchor - 1.0).abs() < 1e-12);
        assert!(rows[1].difference <= 0.0);
        let m = pairwise_cka(&[anchor, b, other]).unwrap();
        let want = m.get("anchor", "other").unwrap() - m.get("b", "other").unwrap();
        assert!((rows[2].difference - want).abs() < 1e-14);
        assert!(differences_to_csv(&rows).unwrap().lines().count() == 4);
    }
}
