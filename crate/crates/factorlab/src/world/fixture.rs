use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FixtureError {
    #[error("reading fixture: {0}")]
    Io(String),
    #[error("line 1: expected header `source,target,accuracy`, got `{0}`")]
    BadHeader(String),
    #[error("line {line}: expected 3 comma-separated fields, got {fields}")]
    FieldCount { line: usize, fields: usize },
    #[error("line {line}: invalid {what} `{value}`")]
    BadField {
        line: usize,
        what: &'static str,
        value: String,
    },
    #[error("line {line}: accuracy {value} outside [0, 1]")]
    OutOfRange { line: usize, value: f64 },
    #[error("line {line}: diagonal entry for domain {domain}")]
    Diagonal { line: usize, domain: usize },
    #[error("line {line}: duplicate entry {from_id}->{to_id}")]
    Duplicate {
        line: usize,
        from_id: usize,
        to_id: usize,
    },
    #[error("missing entry {from_id}->{to_id}")]
    MissingCell { from_id: usize, to_id: usize },
    #[error("need at least 2 domains, found {0}")]
    TooSmall(usize),
}

/// A complete one-to-one transfer accuracy table over domains `1..=m` with
/// the diagonal absent. For the shipped 11-domain table, hand metadata marks
/// which domains show left-handed manipulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFixture {
    m: usize,
    cells: Vec<Option<f64>>,
    left_hand: BTreeSet<usize>,
}

/// Domains of the shipped table recorded with the object held in the left
/// hand; all others are right-handed.
const SHIPPED_LEFT_HAND: [usize; 5] = [2, 3, 7, 9, 11];

/// Path of the transfer table shipped with the crate.
pub fn shipped_fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/core50_one_to_one.csv")
}

/// Loads a `source,target,accuracy` CSV covering every ordered off-diagonal
/// pair of domains `1..=m` exactly once. Hand metadata is attached when the
/// table has the shipped 11-domain shape.
pub fn load_accuracy_fixture(path: impl AsRef<Path>) -> Result<TransferFixture, FixtureError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| FixtureError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_fixture(&text)
}

fn parse_fixture(text: &str) -> Result<TransferFixture, FixtureError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "source,target,accuracy")) => {}
        Some((_, other)) => return Err(FixtureError::BadHeader(other.to_string())),
        None => return Err(FixtureError::BadHeader(String::new())),
    }
    let mut entries: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut max_id = 0usize;
    for (ix, raw) in lines {
        let line = ix + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 3 {
            return Err(FixtureError::FieldCount {
                line,
                fields: fields.len(),
            });
        }
        let id = |what, value: &str| -> Result<usize, FixtureError> {
            match value.trim().parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(FixtureError::BadField {
                    line,
                    what,
                    value: value.to_string(),
                }),
            }
        };
        let source = id("source id", fields[0])?;
        let target = id("target id", fields[1])?;
        let accuracy: f64 = fields[2].trim().parse().map_err(|_| FixtureError::BadField {
            line,
            what: "accuracy",
            value: fields[2].to_string(),
        })?;
        if !accuracy.is_finite() || !(0.0..=1.0).contains(&accuracy) {
            return Err(FixtureError::OutOfRange {
                line,
                value: accuracy,
            });
        }
        if source == target {
            return Err(FixtureError::Diagonal {
                line,
                domain: source,
            });
        }
        max_id = max_id.max(source).max(target);
        entries.push((line, source, target, accuracy));
    }
    let m = max_id;
    if m < 2 {
        return Err(FixtureError::TooSmall(m));
    }
    let mut cells: Vec<Option<f64>> = vec![None; m * m];
    for (line, s, t, a) in entries {
        let slot = &mut cells[(s - 1) * m + (t - 1)];
        if slot.is_some() {
            return Err(FixtureError::Duplicate {
                line,
                from_id: s,
                to_id: t,
            });
        }
        *slot = Some(a);
    }
    for s in 1..=m {
        for t in 1..=m {
            if s != t && cells[(s - 1) * m + (t - 1)].is_none() {
                return Err(FixtureError::MissingCell { from_id: s, to_id: t });
            }
        }
    }
    let left_hand = if m == 11 {
        SHIPPED_LEFT_HAND.into_iter().collect()
    } else {
        BTreeSet::new()
    };
    Ok(TransferFixture {
        m,
        cells,
        left_hand,
    })
}

impl TransferFixture {
    pub fn num_domains(&self) -> usize {
        self.m
    }

    /// Accuracy of training on `source` and testing on `target` (1-based
    /// ids). `None` on the diagonal or outside the table.
    pub fn value(&self, source: usize, target: usize) -> Option<f64> {
        if source < 1 || source > self.m || target < 1 || target > self.m {
            return None;
        }
        self.cells[(source - 1) * self.m + (target - 1)]
    }

    /// Row mean: average accuracy of a source across all other targets.
    pub fn row_avg(&self, source: usize) -> Option<f64> {
        if source < 1 || source > self.m {
            return None;
        }
        let values: Vec<f64> = (1..=self.m).filter_map(|t| self.value(source, t)).collect();
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Column maximum: best accuracy any source achieves on a target.
    pub fn col_max(&self, target: usize) -> Option<f64> {
        if target < 1 || target > self.m {
            return None;
        }
        (1..=self.m)
            .filter_map(|s| self.value(s, target))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }

    /// The worst cell in the table: `(source, target, accuracy)`. The first
    /// cell in row-major order wins ties.
    pub fn min_cell(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::INFINITY);
        for s in 1..=self.m {
            for t in 1..=self.m {
                if let Some(v) = self.value(s, t) {
                    if v < best.2 {
                        best = (s, t, v);
                    }
                }
            }
        }
        best
    }

    /// Row-major cell grid, `None` on the diagonal.
    pub fn cells(&self) -> &[Option<f64>] {
        &self.cells
    }

    pub fn left_hand_ids(&self) -> &BTreeSet<usize> {
        &self.left_hand
    }

    pub fn is_left_hand(&self, id: usize) -> bool {
        self.left_hand.contains(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_fixture_loads_with_expected_shape() {
        let f = load_accuracy_fixture(shipped_fixture_path()).unwrap();
        assert_eq!(f.num_domains(), 11);
        assert_eq!(f.cells().iter().flatten().count(), 110);
        assert_eq!(f.value(1, 2), Some(0.67));
        assert_eq!(f.value(8, 1), Some(0.83));
        assert_eq!(f.value(9, 6), Some(0.30));
        assert_eq!(f.value(10, 4), Some(0.81));
        assert_eq!(f.value(3, 3), None);
        assert_eq!(f.value(0, 1), None);
        assert_eq!(f.value(1, 12), None);
    }

    #[test]
    fn shipped_marginals_match_published_summary() {
        let f = load_accuracy_fixture(shipped_fixture_path()).unwrap();
        assert!((f.row_avg(10).unwrap() - 0.69).abs() < 0.005);
        assert!((f.col_max(1).unwrap() - 0.83).abs() < 1e-12);
        assert_eq!(f.min_cell(), (9, 6, 0.30));
    }

    #[test]
    fn shipped_hand_metadata() {
        let f = load_accuracy_fixture(shipped_fixture_path()).unwrap();
        let left: Vec<usize> = f.left_hand_ids().iter().copied().collect();
        assert_eq!(left, vec![2, 3, 7, 9, 11]);
        assert!(f.is_left_hand(9));
        assert!(!f.is_left_hand(1));
    }

    #[test]
    fn header_is_required() {
        assert_eq!(
            parse_fixture("a,b,c\n1,2,0.5\n2,1,0.5\n"),
            Err(FixtureError::BadHeader("a,b,c".into()))
        );
    }

    #[test]
    fn bad_fields_name_the_line() {
        let text = "source,target,accuracy\n1,2,0.5\n2,1,oops\n";
        assert_eq!(
            parse_fixture(text),
            Err(FixtureError::BadField {
                line: 3,
                what: "accuracy",
                value: "oops".into()
            })
        );
        let text = "source,target,accuracy\n1,2\n";
        assert_eq!(
            parse_fixture(text),
            Err(FixtureError::FieldCount { line: 2, fields: 2 })
        );
        let text = "source,target,accuracy\n0,2,0.5\n";
        assert!(matches!(
            parse_fixture(text),
            Err(FixtureError::BadField { line: 2, .. })
        ));
    }

    #[test]
    fn out_of_range_accuracy_names_the_line() {
        let text = "source,target,accuracy\n1,2,0.5\n2,1,1.5\n";
        assert_eq!(
            parse_fixture(text),
            Err(FixtureError::OutOfRange {
                line: 3,
                value: 1.5
            })
        );
        let text = "source,target,accuracy\n1,2,NaN\n";
        assert!(parse_fixture(text).is_err());
    }

    #[test]
    fn structural_errors() {
        let text = "source,target,accuracy\n1,1,0.5\n";
        assert_eq!(
            parse_fixture(text),
            Err(FixtureError::Diagonal { line: 2, domain: 1 })
        );
        let text = "source,target,accuracy\n1,2,0.5\n1,2,0.6\n2,1,0.5\n";
        assert_eq!(
            parse_fixture(text),
            Err(FixtureError::Duplicate {
                line: 3,
                from_id: 1,
                to_id: 2
            })
        );
        let text = "source,target,accuracy\n1,2,0.5\n2,1,0.5\n1,3,0.5\n3,1,0.5\n2,3,0.5\n";
        assert_eq!(
            parse_fixture(text),
            Err(FixtureError::MissingCell { from_id: 3, to_id: 2 })
        );
        let text = "source,target,accuracy\n";
        assert_eq!(parse_fixture(text), Err(FixtureError::TooSmall(0)));
    }

    #[test]
    fn small_tables_have_no_hand_metadata() {
        let text = "source,target,accuracy\n1,2,0.5\n2,1,0.5\n";
        let f = parse_fixture(text).unwrap();
        assert_eq!(f.num_domains(), 2);
        assert!(f.left_hand_ids().is_empty());
    }
}
