//! Accuracy-matrix bookkeeping and the continual-learning summary metrics.
//!
//! Accuracies are kept as exact `correct / total` rationals and only turned
//! into floats for reporting.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rational = Ratio<i128>;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("incomplete accuracy matrix: {0}")]
    State(String),
}

pub fn to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `a_{j,i}` for `i ≤ j`, stored as correct counts against test-set sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccuracyMatrix {
    sizes: Vec<u64>,
    correct: Vec<Vec<Option<u64>>>,
}

impl AccuracyMatrix {
    /// `sizes[i] = |Z_i|`, every size positive.
    pub fn new(sizes: Vec<u64>) -> Result<Self, MetricsError> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(MetricsError::Contract("test sets must be non-empty".into()));
        }
        let correct = (0..sizes.len()).map(|j| vec![None; j + 1]).collect();
        Ok(Self { sizes, correct })
    }

    pub fn domains(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    /// Records the count of correct predictions on domain `i` after stage `j`.
    pub fn record(&mut self, stage: usize, domain: usize, correct: u64) -> Result<(), MetricsError> {
        if stage >= self.domains() || domain > stage {
            return Err(MetricsError::Contract(format!(
                "entry ({stage}, {domain}) outside the lower triangle of a {0}×{0} matrix",
                self.domains()
            )));
        }
        if correct > self.sizes[domain] {
            return Err(MetricsError::Contract(format!(
                "{correct} correct out of {} samples",
                self.sizes[domain]
            )));
        }
        self.correct[stage][domain] = Some(correct);
        Ok(())
    }

    pub fn correct(&self, stage: usize, domain: usize) -> Option<u64> {
        self.correct.get(stage)?.get(domain).copied().flatten()
    }

    pub fn accuracy(&self, stage: usize, domain: usize) -> Option<Rational> {
        self.correct(stage, domain)
            .map(|c| Rational::new(c as i128, self.sizes[domain] as i128))
    }

    fn row(&self, stage: usize) -> Result<Vec<Rational>, MetricsError> {
        (0..=stage)
            .map(|i| {
                self.accuracy(stage, i)
                    .ok_or_else(|| MetricsError::State(format!("missing entry ({stage}, {i})")))
            })
            .collect()
    }

    fn last(&self) -> usize {
        self.domains() - 1
    }

    /// `Σ_i c_{T,i} / Σ_i |Z_i|`.
    pub fn average_accuracy(&self) -> Result<Rational, MetricsError> {
        let t = self.last();
        self.row(t)?;
        let hits: u64 = (0..=t).map(|i| self.correct(t, i).unwrap_or(0)).sum();
        Ok(Rational::new(hits as i128, self.sizes.iter().sum::<u64>() as i128))
    }

    /// Mean of the final-stage per-domain accuracies.
    pub fn avg_task_accuracy(&self) -> Result<Rational, MetricsError> {
        let row = self.row(self.last())?;
        Ok(row.iter().sum::<Rational>() / Rational::from(row.len() as i128))
    }

    /// Per-domain backward transfer for `i < T` and its mean, or `None` when
    /// there is a single domain.
    pub fn forgetting(&self) -> Result<Option<Forgetting>, MetricsError> {
        let t = self.domains();
        let rows = (0..t).map(|j| self.row(j)).collect::<Result<Vec<_>, _>>()?;
        if t < 2 {
            return Ok(None);
        }
        let bwt: Vec<Rational> = (0..t - 1)
            .map(|i| {
                let sum: Rational = (i + 1..t).map(|j| rows[j][i] - rows[i][i]).sum();
                sum / Rational::from((t - 1 - i) as i128)
            })
            .collect();
        let raw = bwt.iter().sum::<Rational>() / Rational::from((t - 1) as i128);
        Ok(Some(Forgetting { bwt, raw, reported: -raw }))
    }

    /// Mean accuracy over the domains seen at every stage.
    pub fn stage_curve(&self) -> Result<Vec<Rational>, MetricsError> {
        (0..self.domains())
            .map(|j| {
                let row = self.row(j)?;
                Ok(row.iter().sum::<Rational>() / Rational::from(row.len() as i128))
            })
            .collect()
    }

    /// `stage,domain,accuracy` rows, 0-based indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,domain,accuracy\n");
        for j in 0..self.domains() {
            for i in 0..=j {
                if let Some(a) = self.accuracy(j, i) {
                    out.push_str(&format!("{j},{i},{}\n", to_f64(a)));
                }
            }
        }
        out
    }

    pub fn report(&self, domain_id_accuracy: Option<f64>) -> Result<MetricsReport, MetricsError> {
        let forgetting = self.forgetting()?;
        Ok(MetricsReport {
            average_accuracy: to_f64(self.average_accuracy()?),
            avg_task_accuracy: to_f64(self.avg_task_accuracy()?),
            forgetting: forgetting.as_ref().map(|f| to_f64(f.reported)),
            raw_forgetting: forgetting.as_ref().map(|f| to_f64(f.raw)),
            backward_transfer: forgetting
                .map(|f| f.bwt.into_iter().map(to_f64).collect())
                .unwrap_or_default(),
            domain_id_accuracy,
            stage_curve: self.stage_curve()?.into_iter().map(to_f64).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forgetting {
    pub bwt: Vec<Rational>,
    /// Mean backward transfer.
    pub raw: Rational,
    /// Negated mean backward transfer: positive means forgetting.
    pub reported: Rational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub average_accuracy: f64,
    pub avg_task_accuracy: f64,
    pub forgetting: Option<f64>,
    pub raw_forgetting: Option<f64>,
    pub backward_transfer: Vec<f64>,
    pub domain_id_accuracy: Option<f64>,
    pub stage_curve: Vec<f64>,
}

/// Builds the same metrics stage by stage, keeping running sums of
/// backward transfer instead of the whole matrix.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    sizes: Vec<u64>,
    diagonal: Vec<Rational>,
    transfer_sums: Vec<Rational>,
    last_row: Vec<u64>,
    stages: usize,
}

impl MetricsAccumulator {
    pub fn new(sizes: Vec<u64>) -> Result<Self, MetricsError> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(MetricsError::Contract("test sets must be non-empty".into()));
        }
        Ok(Self {
            transfer_sums: vec![Rational::from(0); sizes.len()],
            sizes,
            diagonal: Vec::new(),
            last_row: Vec::new(),
            stages: 0,
        })
    }

    /// Adds the next stage's row of correct counts (domains `0..=stage`).
    pub fn push_stage(&mut self, correct: &[u64]) -> Result<(), MetricsError> {
        let j = self.stages;
        if j >= self.sizes.len() || correct.len() != j + 1 {
            return Err(MetricsError::Contract(format!(
                "stage {j} needs {} counts, got {}",
                j + 1,
                correct.len()
            )));
        }
        if correct.iter().zip(&self.sizes).any(|(c, s)| c > s) {
            return Err(MetricsError::Contract("more correct than samples".into()));
        }
        let acc = |i: usize| Rational::new(correct[i] as i128, self.sizes[i] as i128);
        for i in 0..j {
            self.transfer_sums[i] += acc(i) - self.diagonal[i];
        }
        self.diagonal.push(acc(j));
        self.last_row = correct.to_vec();
        self.stages += 1;
        Ok(())
    }

    fn complete(&self) -> Result<(), MetricsError> {
        if self.stages == self.sizes.len() {
            Ok(())
        } else {
            Err(MetricsError::State(format!("{} of {} stages recorded", self.stages, self.sizes.len())))
        }
    }

    pub fn average_accuracy(&self) -> Result<Rational, MetricsError> {
        self.complete()?;
        Ok(Rational::new(
            self.last_row.iter().sum::<u64>() as i128,
            self.sizes.iter().sum::<u64>() as i128,
        ))
    }

    pub fn avg_task_accuracy(&self) -> Result<Rational, MetricsError> {
        self.complete()?;
        let total: Rational = self
            .last_row
            .iter()
            .zip(&self.sizes)
            .map(|(&c, &s)| Rational::new(c as i128, s as i128))
            .sum();
        Ok(total / Rational::from(self.sizes.len() as i128))
    }

    pub fn forgetting(&self) -> Result<Option<Forgetting>, MetricsError> {
        self.complete()?;
        let t = self.sizes.len();
        if t < 2 {
            return Ok(None);
        }
        let bwt: Vec<Rational> = (0..t - 1)
            .map(|i| self.transfer_sums[i] / Rational::from((t - 1 - i) as i128))
            .collect();
        let raw = bwt.iter().sum::<Rational>() / Rational::from((t - 1) as i128);
        Ok(Some(Forgetting { bwt, raw, reported: -raw }))
    }
}
