//! Balanced longitudinal datasets and their delimited-text form.
//!
//! File layout (one row per measurement, individuals contiguous):
//!
//! ```text
//! id,age,y,split[,a1,b1,c1]
//! 1,9,139.82,train,3.1,-0.42,0.013
//! ```
//!
//! Numbers use `.` as decimal point and Rust's shortest round-trip
//! formatting, so a written file reads back bit-exactly.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::RandomEffects;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: u64,
    pub y: Vec<f64>,
    pub split: Split,
    pub truth: Option<RandomEffects>,
}

/// Individuals measured at one shared set of ages.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthDataset {
    pub times: Vec<f64>,
    pub individuals: Vec<Individual>,
}

impl GrowthDataset {
    pub fn new(times: Vec<f64>, individuals: Vec<Individual>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Format("dataset has no time points".into()));
        }
        for ind in &individuals {
            if ind.y.len() != times.len() {
                return Err(Error::DimMismatch { expected: times.len(), got: ind.y.len() });
            }
            if ind.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("individual {} has non-finite measurements", ind.id)));
            }
        }
        Ok(Self { times, individuals })
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Individual> + '_ {
        self.individuals.iter().filter(move |i| i.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// True when every individual carries its generating random effects.
    pub fn has_truth(&self) -> bool {
        !self.individuals.is_empty() && self.individuals.iter().all(|i| i.truth.is_some())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let with_truth = self.has_truth();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id", "age", "y", "split"];
        if with_truth {
            header.extend(["a1", "b1", "c1"]);
        }
        w.write_record(&header).map_err(csv_err)?;
        for ind in &self.individuals {
            for (t, y) in self.times.iter().zip(&ind.y) {
                let mut rec = vec![ind.id.to_string(), t.to_string(), y.to_string(), ind.split.to_string()];
                if let (true, Some(u)) = (with_truth, ind.truth) {
                    rec.extend([u.a1.to_string(), u.b1.to_string(), u.c1.to_string()]);
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let (id_c, age_c, y_c) = match (col("id"), col("age"), col("y")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::Format("header must contain id, age and y".into())),
        };
        let split_c = col("split");
        let truth_c = match (col("a1"), col("b1"), col("c1")) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            (None, None, None) => None,
            _ => return Err(Error::Format("truth columns a1, b1, c1 must appear together".into())),
        };

        struct Partial {
            id: u64,
            ages: Vec<f64>,
            y: Vec<f64>,
            split: Split,
            truth: Option<RandomEffects>,
        }
        let mut parts: Vec<Partial> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = line + 2;
            let field = |c: usize| rec.get(c).ok_or_else(|| Error::Format(format!("row {row}: missing column")));
            let num = |c: usize| -> Result<f64> {
                let s = field(c)?;
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("row {row}: `{s}` is not a finite number")))
            };
            let id: u64 = field(id_c)?
                .parse()
                .map_err(|_| Error::Format(format!("row {row}: id must be a non-negative integer")))?;
            let split = match split_c {
                Some(c) => field(c)?.parse()?,
                None => Split::Validation,
            };
            let truth = match truth_c {
                Some([a, b, c]) => Some(RandomEffects::new(num(a)?, num(b)?, num(c)?)),
                None => None,
            };
            let (age, y) = (num(age_c)?, num(y_c)?);
            match parts.last_mut() {
                Some(p) if p.id == id => {
                    if p.split != split || p.truth != truth {
                        return Err(Error::Format(format!("row {row}: split/truth changes within individual {id}")));
                    }
                    p.ages.push(age);
                    p.y.push(y);
                }
                _ => {
                    if !seen.insert(id) {
                        return Err(Error::Format(format!("row {row}: rows of individual {id} are not contiguous")));
                    }
                    parts.push(Partial { id, ages: vec![age], y: vec![y], split, truth });
                }
            }
        }
        let times = parts.first().map(|p| p.ages.clone()).ok_or_else(|| Error::Format("no data rows".into()))?;
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format("ages must be strictly increasing within an individual".into()));
        }
        let mut individuals = Vec::with_capacity(parts.len());
        for p in parts {
            if p.ages != times {
                return Err(Error::Format(format!(
                    "individual {} has a different age vector; only balanced designs are supported",
                    p.id
                )));
            }
            individuals.push(Individual { id: p.id, y: p.y, split: p.split, truth: p.truth });
        }
        GrowthDataset::new(times, individuals)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
