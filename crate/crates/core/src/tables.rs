//! Versioned JSON form of [`ValueTables`].
//!
//! The document embeds the source MDP so that it is self-contained, and a hash
//! of that MDP so that a table file can be matched against a spec file.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{shift_costs, Horizon, MdpDocument, MdpSpec, ModelError};
use crate::pwl::{Breakpoint, PwlConcave, PwlError};
use crate::solver::{InfiniteInfo, Stage, TableHorizon, ValueTables};

pub const FORMAT: &str = "cvar-mdp-tables";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TablesError {
    #[error("invalid tables JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported tables format `{format}` version {version}")]
    Format { format: String, version: u32 },
    #[error("embedded spec: {0}")]
    Spec(#[from] ModelError),
    #[error("spec hash mismatch: tables record {recorded}, spec hashes to {actual}")]
    HashMismatch { recorded: String, actual: String },
    #[error("stage {stage}, state `{state}`: {source}")]
    Function { stage: usize, state: String, source: PwlError },
    #[error("inconsistent tables: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HorizonDocument {
    Finite { stages: usize },
    Infinite(InfiniteInfo),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDocument {
    pub stage: usize,
    pub v: IndexMap<String, Vec<Breakpoint>>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub q: IndexMap<String, IndexMap<String, Vec<Breakpoint>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablesDocument {
    pub format: String,
    pub version: u32,
    pub spec_hash: String,
    pub horizon: HorizonDocument,
    pub mean_weight: f64,
    pub cost_shift: crate::model::CostShift,
    pub spec: MdpDocument,
    pub stages: Vec<StageDocument>,
}

impl ValueTables {
    pub fn to_document(&self) -> TablesDocument {
        let spec = &self.source;
        let stage_index = |i: usize| match self.horizon {
            TableHorizon::Finite(_) => i,
            TableHorizon::Infinite(ref info) => info.iterations,
        };
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| StageDocument {
                stage: stage_index(i),
                v: (0..spec.num_states()).map(|x| (spec.state_name(x).to_string(), st.v[x].breakpoints())).collect(),
                q: st
                    .q
                    .iter()
                    .enumerate()
                    .map(|(x, qs)| {
                        let per_action = qs
                            .iter()
                            .enumerate()
                            .map(|(a, q)| (spec.actions(x)[a].clone(), q.breakpoints()))
                            .collect();
                        (spec.state_name(x).to_string(), per_action)
                    })
                    .collect(),
            })
            .collect();
        TablesDocument {
            format: FORMAT.to_string(),
            version: VERSION,
            spec_hash: spec.spec_hash(),
            horizon: match &self.horizon {
                TableHorizon::Finite(n) => HorizonDocument::Finite { stages: *n },
                TableHorizon::Infinite(info) => HorizonDocument::Infinite(info.clone()),
            },
            mean_weight: self.mean_weight,
            cost_shift: self.shift,
            spec: spec.to_document(),
            stages,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("tables serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, TablesError> {
        let doc: TablesDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    pub fn from_document(doc: &TablesDocument) -> Result<Self, TablesError> {
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(TablesError::Format { format: doc.format.clone(), version: doc.version });
        }
        let source = MdpSpec::from_document(&doc.spec)?;
        let actual = source.spec_hash();
        if actual != doc.spec_hash {
            return Err(TablesError::HashMismatch { recorded: doc.spec_hash.clone(), actual });
        }
        let (horizon, horizon_kind, expected_stages) = match &doc.horizon {
            HorizonDocument::Finite { stages } => (TableHorizon::Finite(*stages), Horizon::Finite(*stages), stages + 1),
            HorizonDocument::Infinite(info) => (TableHorizon::Infinite(info.clone()), Horizon::Infinite, 1),
        };
        if doc.stages.len() != expected_stages {
            return Err(TablesError::Shape(format!(
                "expected {expected_stages} stages, found {}",
                doc.stages.len()
            )));
        }
        let (shifted, shift) = shift_costs(&source, horizon_kind);
        let shifted = if horizon_kind == Horizon::Infinite { shifted.with_zero_terminal() } else { shifted };
        let model = shifted.with_mean_weight(doc.mean_weight);

        let m = source.num_states();
        let mut stages = Vec::with_capacity(doc.stages.len());
        for (i, sd) in doc.stages.iter().enumerate() {
            let rebuild = |name: &str, rows: &[Breakpoint]| {
                PwlConcave::from_breakpoints(rows).map_err(|source| TablesError::Function {
                    stage: sd.stage,
                    state: name.to_string(),
                    source,
                })
            };
            let mut v = Vec::with_capacity(m);
            let mut q = Vec::new();
            for x in 0..m {
                let name = source.state_name(x);
                let rows = sd
                    .v
                    .get(name)
                    .ok_or_else(|| TablesError::Shape(format!("stage {}: missing state `{name}`", sd.stage)))?;
                v.push(rebuild(name, rows)?);
            }
            let needs_q = !(matches!(horizon, TableHorizon::Finite(_)) && i == 0);
            if needs_q {
                for x in 0..m {
                    let name = source.state_name(x);
                    let per_action = sd.q.get(name).ok_or_else(|| {
                        TablesError::Shape(format!("stage {}: missing action values for `{name}`", sd.stage))
                    })?;
                    let qs = source
                        .actions(x)
                        .iter()
                        .map(|act| {
                            let rows = per_action.get(act).ok_or_else(|| {
                                TablesError::Shape(format!("stage {}: missing action `{act}` at `{name}`", sd.stage))
                            })?;
                            rebuild(name, rows)
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    q.push(qs);
                }
            }
            stages.push(Stage { v, q });
        }
        Ok(ValueTables { source, model, shift, mean_weight: doc.mean_weight, horizon, stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Transition;
    use crate::solver::{solve_finite, solve_infinite, SolverOptions};

    fn spec(beta: f64) -> MdpSpec {
        let e = |to, prob, c| Transition { to, prob, cvar_cost: c, mean_cost: 1.0 };
        MdpSpec::from_parts(
            vec!["s".into(), "g".into(), "b".into()],
            vec![vec!["risky".into(), "safe".into()], vec!["stay".into()], vec!["stay".into()]],
            beta,
            vec![
                vec![vec![e(1, 0.5, 0.0), e(2, 0.5, 10.0)], vec![e(1, 1.0, 6.0)]],
                vec![vec![e(1, 1.0, 1.0)]],
                vec![vec![e(2, 1.0, -2.0)]],
            ],
            vec![0.0, 1.0, 2.0],
            vec![0.0; 3],
        )
        .unwrap()
    }

    #[test]
    fn finite_round_trip() {
        let t = solve_finite(&spec(0.9), 3, &SolverOptions::default()).unwrap();
        let back = ValueTables::from_json(&t.to_json()).unwrap();
        assert_eq!(back.horizon(), t.horizon());
        assert_eq!(back.model(), t.model());
        assert_eq!(back.shift(), t.shift());
        for (a, b) in t.stages().iter().zip(back.stages()) {
            for (f, g) in a.v.iter().zip(&b.v) {
                assert!(f.sup_distance(g).unwrap() < 1e-12);
            }
            assert_eq!(a.q.len(), b.q.len());
        }
    }

    #[test]
    fn infinite_round_trip() {
        let t = solve_infinite(&spec(0.5), 1e-6, &SolverOptions::default()).unwrap();
        let back = ValueTables::from_json(&t.to_json()).unwrap();
        assert_eq!(back.model(), t.model());
        assert_eq!(back.stages().len(), 1);
    }

    #[test]
    fn tampered_spec_is_detected() {
        let t = solve_finite(&spec(0.9), 1, &SolverOptions::default()).unwrap();
        let mut doc = t.to_document();
        doc.spec.discount = 0.8;
        assert!(matches!(ValueTables::from_document(&doc), Err(TablesError::HashMismatch { .. })));
        let mut doc = t.to_document();
        doc.version = 99;
        assert!(matches!(ValueTables::from_document(&doc), Err(TablesError::Format { .. })));
    }
}
