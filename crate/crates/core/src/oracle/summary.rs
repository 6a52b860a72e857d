use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{eval_stats, EvalStats};
use crate::dsp::NoisePartition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Quality,
    Intelligibility,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Quality, Task::Intelligibility];

    pub fn name(self) -> &'static str {
        match self {
            Task::Quality => "quality",
            Task::Intelligibility => "intelligibility",
        }
    }
}

/// How a test utterance was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Noisy,
    Enhanced,
}

/// Summary column: one source or both pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceGroup {
    Noisy,
    Enhanced,
    Pooled,
}

impl SourceGroup {
    pub fn name(self) -> &'static str {
        match self {
            SourceGroup::Noisy => "noisy",
            SourceGroup::Enhanced => "enhanced",
            SourceGroup::Pooled => "pooled",
        }
    }
}

impl From<Source> for SourceGroup {
    fn from(s: Source) -> Self {
        match s {
            Source::Noisy => SourceGroup::Noisy,
            Source::Enhanced => SourceGroup::Enhanced,
        }
    }
}

fn partition_name(p: NoisePartition) -> &'static str {
    match p {
        NoisePartition::Seen => "seen",
        NoisePartition::Unseen => "unseen",
    }
}

/// One prediction for one task on one utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalItem {
    pub condition: NoisePartition,
    pub source: Source,
    pub task: Task,
    pub predicted: f64,
    pub truth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalCell {
    pub condition: NoisePartition,
    pub source: SourceGroup,
    pub task: Task,
    pub n: usize,
    /// `None` when the cell has fewer than two items or a constant side.
    pub stats: Option<EvalStats<f64>>,
}

/// Per (condition, source, task) correlation table.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalSummary {
    pub cells: Vec<EvalCell>,
}

impl EvalSummary {
    /// Groups items into cells; only non-empty cells appear, in a fixed order.
    pub fn compute(items: &[EvalItem]) -> Self {
        let mut groups: BTreeMap<(NoisePartition, SourceGroup, Task), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for it in items {
            for g in [SourceGroup::from(it.source), SourceGroup::Pooled] {
                let e = groups.entry((it.condition, g, it.task)).or_default();
                e.0.push(it.predicted);
                e.1.push(it.truth);
            }
        }
        let cells = groups
            .into_iter()
            .map(|((condition, source, task), (p, t))| EvalCell {
                condition,
                source,
                task,
                n: p.len(),
                stats: eval_stats(&p, &t).ok(),
            })
            .collect();
        Self { cells }
    }

    pub fn get(&self, condition: NoisePartition, source: SourceGroup, task: Task) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.condition == condition && c.source == source && c.task == task)
    }

    /// `condition,source,task,n,lcc,srcc,mse`; undefined statistics are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,source,task,n,lcc,srcc,mse\n");
        for c in &self.cells {
            let stats = c.stats.map_or_else(
                || ",,".to_string(),
                |st| format!("{:.10},{:.10},{:.10}", st.lcc, st.srcc, st.mse),
            );
            writeln!(s, "{},{},{},{},{}", partition_name(c.condition), c.source.name(), c.task.name(), c.n, stats)
                .unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(c: NoisePartition, s: Source, t: Task, p: f64, y: f64) -> EvalItem {
        EvalItem { condition: c, source: s, task: t, predicted: p, truth: y }
    }

    #[test]
    fn pooled_cells_hold_both_sources() {
        use NoisePartition::*;
        let items = vec![
            item(Seen, Source::Noisy, Task::Quality, 1.0, 1.1),
            item(Seen, Source::Noisy, Task::Quality, 2.0, 2.2),
            item(Seen, Source::Enhanced, Task::Quality, 3.0, 2.9),
            item(Unseen, Source::Noisy, Task::Intelligibility, 0.5, 0.4),
        ];
        let s = EvalSummary::compute(&items);
        assert_eq!(s.cells.len(), 5);
        assert_eq!(s.get(Seen, SourceGroup::Pooled, Task::Quality).unwrap().n, 3);
        assert!(s.get(Seen, SourceGroup::Enhanced, Task::Quality).unwrap().stats.is_none());
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.contains("unseen,noisy,intelligibility,1,,,"));
    }
}
