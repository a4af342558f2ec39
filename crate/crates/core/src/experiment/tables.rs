//! Result tables: one per task, methods as rows grouped by collaboration
//! direction, categories (then "All") times metrics as columns.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::RunRecord;
use crate::collab::CollabDirection;
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_categories, aggregate_human, AggregationMode, AnnotationRecord, MetricReport,
    ACCURACY, DISTINCT_1, F1, HIT_AT_5, INFORMATIVENESS, MRR_AT_5, PRECISION, RECALL, RELEVANCE,
};
use crate::tasks::TaskKind;

/// Marks the best value of a column.
pub const BEST_MARK: &str = "*";

pub fn metric_order(task: TaskKind) -> &'static [&'static str] {
    match task {
        TaskKind::Understanding | TaskKind::Elicitation => &[PRECISION, RECALL, F1],
        TaskKind::Recommendation => &[ACCURACY, HIT_AT_5, MRR_AT_5],
        TaskKind::Generation => &[DISTINCT_1],
    }
}

fn section_title(d: CollabDirection) -> &'static str {
    match d {
        CollabDirection::None => "No collaboration",
        CollabDirection::LlmAssistsCrs => "LLM assisting CRS",
        CollabDirection::CrsAssistsLlm => "CRS assisting LLM",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub section: String,
    pub method: String,
    /// `None` for a metric the method does not define or a failed cell.
    pub cells: Vec<Option<f64>>,
    pub best: Vec<bool>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    /// (column group, metric) per column.
    pub columns: Vec<(String, String)>,
    pub rows: Vec<TableRow>,
}

impl Table {
    fn mark_best(&mut self) {
        for c in 0..self.columns.len() {
            let best = self
                .rows
                .iter()
                .filter_map(|r| r.cells[c])
                .fold(f64::NEG_INFINITY, f64::max);
            for r in &mut self.rows {
                r.best[c] = r.cells[c] == Some(best);
            }
        }
    }

    fn cell_text(row: &TableRow, c: usize) -> String {
        match row.cells[c] {
            Some(v) if row.best[c] => format!("{v:.4}{BEST_MARK}"),
            Some(v) => format!("{v:.4}"),
            None if row.failed => "ERR".into(),
            None => "-".into(),
        }
    }

    /// Aligned plain text.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Method".to_string()];
        header.extend(self.columns.iter().map(|(g, m)| format!("{g} {m}")));
        let mut lines: Vec<Vec<String>> = Vec::new();
        let mut sections = Vec::new();
        for r in &self.rows {
            if sections.last() != Some(&r.section) {
                sections.push(r.section.clone());
                lines.push(vec![format!("[{}]", r.section)]);
            }
            let mut line = vec![r.method.clone()];
            line.extend((0..self.columns.len()).map(|c| Self::cell_text(r, c)));
            lines.push(line);
        }
        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for l in lines.iter().filter(|l| l.len() > 1) {
            for (w, s) in widths.iter_mut().zip(l) {
                *w = (*w).max(s.chars().count());
            }
        }
        let fmt = |l: &[String]| {
            l.iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = format!("{}\n{}\n", self.title, fmt(&header));
        for l in &lines {
            if l.len() == 1 {
                out.push_str(&l[0]);
                out.push('\n');
            } else {
                out.push_str(&fmt(l));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["section".to_string(), "method".to_string()];
        header.extend(self.columns.iter().map(|(g, m)| format!("{g} {m}")));
        w.write_record(&header)
            .map_err(|e| Error::Config(e.to_string()))?;
        for r in &self.rows {
            let mut line = vec![r.section.clone(), r.method.clone()];
            line.extend((0..self.columns.len()).map(|c| Self::cell_text(r, c)));
            w.write_record(&line)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn row(&self, method: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn direction_rank(d: CollabDirection) -> u8 {
    match d {
        CollabDirection::None => 0,
        CollabDirection::LlmAssistsCrs => 1,
        CollabDirection::CrsAssistsLlm => 2,
    }
}

/// One table per task present in `records`. An "All" column group is added
/// when there is more than one category.
pub fn emit_tables(records: &[RunRecord], mode: AggregationMode) -> Vec<Table> {
    let tasks: BTreeSet<TaskKind> = records.iter().map(|r| r.task).collect();
    let mut tables = Vec::new();
    for task in tasks {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.task == task).collect();
        let categories: BTreeSet<&str> = mine.iter().map(|r| r.category.as_str()).collect();
        let mut groups: Vec<String> = categories.iter().map(|c| c.to_string()).collect();
        if categories.len() > 1 {
            groups.push("All".into());
        }
        let metrics = metric_order(task);
        let columns: Vec<(String, String)> = groups
            .iter()
            .flat_map(|g| metrics.iter().map(move |m| (g.clone(), m.to_string())))
            .collect();

        let mut methods: BTreeMap<(u8, String), Vec<&RunRecord>> = BTreeMap::new();
        for r in &mine {
            methods
                .entry((direction_rank(r.direction), r.method.clone()))
                .or_default()
                .push(r);
        }
        let mut rows = Vec::new();
        for ((_, method), recs) in methods {
            let direction = recs[0].direction;
            let mut per_group: BTreeMap<String, MetricReport> = BTreeMap::new();
            let mut failed = false;
            for r in &recs {
                match &r.report {
                    Some(rep) => {
                        per_group.insert(r.category.clone(), rep.clone());
                    }
                    None => failed = true,
                }
            }
            if categories.len() > 1 && per_group.len() == categories.len() {
                let reports: Vec<MetricReport> = per_group.values().cloned().collect();
                if let Ok(all) = aggregate_categories(&reports, mode) {
                    per_group.insert("All".into(), all);
                }
            }
            let cells = columns
                .iter()
                .map(|(g, m)| per_group.get(g).and_then(|rep| rep.get(m)))
                .collect::<Vec<_>>();
            rows.push(TableRow {
                section: section_title(direction).into(),
                method,
                best: vec![false; cells.len()],
                cells,
                failed,
            });
        }
        let mut table = Table {
            title: format!("Task: {task}"),
            columns,
            rows,
        };
        table.mark_best();
        tables.push(table);
    }
    tables
}

/// Mean human scores per method.
pub fn human_table(records: &[AnnotationRecord]) -> Table {
    let methods: BTreeSet<&str> = records.iter().map(AnnotationRecord::method_id).collect();
    let rows = methods
        .into_iter()
        .map(|m| {
            let (i, r) = aggregate_human(records, m).expect("method has records");
            TableRow {
                section: "Human evaluation".into(),
                method: m.to_string(),
                cells: vec![Some(i), Some(r)],
                best: vec![false, false],
                failed: false,
            }
        })
        .collect();
    let mut table = Table {
        title: "Human evaluation".into(),
        columns: vec![
            ("All".into(), INFORMATIVENESS.into()),
            ("All".into(), RELEVANCE.into()),
        ],
        rows,
    };
    table.mark_best();
    table
}

/// Write `<task>.txt` and `<task>.csv` for each table.
pub fn write_tables(dir: &Path, tables: &[Table]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for t in tables {
        let stem = t
            .title
            .trim_start_matches("Task: ")
            .replace(' ', "_")
            .to_lowercase();
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, t.to_text()).map_err(|e| Error::io(&txt, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, t.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        written.push(txt);
        written.push(csv_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn record(method: &str, direction: CollabDirection, category: &str, f1: f64) -> RunRecord {
        let mut values = BTreeMap::new();
        values.insert(PRECISION.to_string(), f1);
        values.insert(RECALL.to_string(), f1);
        values.insert(F1.to_string(), f1);
        let mut fractions = BTreeMap::new();
        fractions.insert(PRECISION.to_string(), (f1 * 10.0, 10.0));
        fractions.insert(RECALL.to_string(), (f1 * 10.0, 10.0));
        RunRecord {
            method: method.into(),
            direction,
            task: TaskKind::Understanding,
            category: category.into(),
            report: Some(MetricReport {
                task: TaskKind::Understanding,
                category: category.into(),
                values,
                support: 10,
                mode: None,
                fractions,
                parse_failures: 0,
            }),
            error: None,
            config_hash: "h".into(),
            started_ms: 0,
            finished_ms: 0,
            deterministic: true,
            assist_failures: 0,
            artifacts: Default::default(),
        }
    }

    #[test]
    fn single_record_single_cell_group() {
        let t = emit_tables(
            &[record("BCRS", CollabDirection::None, "Shoes", 0.5)],
            AggregationMode::Macro,
        );
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].rows.len(), 1);
        let groups: BTreeSet<&str> = t[0].columns.iter().map(|(g, _)| g.as_str()).collect();
        assert_eq!(groups.len(), 1);
    }

    #[test]
    fn dominant_row_has_all_marks() {
        let recs = [
            record("BCRS", CollabDirection::None, "Shoes", 0.9),
            record("CLLM", CollabDirection::None, "Shoes", 0.4),
            record("BCRS", CollabDirection::None, "Phones", 0.8),
            record("CLLM", CollabDirection::None, "Phones", 0.3),
        ];
        let t = &emit_tables(&recs, AggregationMode::Macro)[0];
        assert!(t.row("BCRS").unwrap().best.iter().all(|b| *b));
        assert!(t.row("CLLM").unwrap().best.iter().all(|b| !*b));
        let order: Vec<String> = t.columns.iter().map(|(g, m)| format!("{g} {m}")).collect();
        assert_eq!(
            order,
            [
                "Phones P",
                "Phones R",
                "Phones F1",
                "Shoes P",
                "Shoes R",
                "Shoes F1",
                "All P",
                "All R",
                "All F1"
            ]
        );
        assert!(t.to_text().contains("0.9000*"));
        assert!(t.to_csv().unwrap().lines().count() == 3);
    }

    #[test]
    fn sections_follow_direction_order() {
        let recs = [
            record("BCRS-CLLM", CollabDirection::CrsAssistsLlm, "Shoes", 0.2),
            record("CLLM-BCRS", CollabDirection::LlmAssistsCrs, "Shoes", 0.3),
            record("BCRS", CollabDirection::None, "Shoes", 0.1),
        ];
        let t = &emit_tables(&recs, AggregationMode::Macro)[0];
        let sections: Vec<&str> = t.rows.iter().map(|r| r.section.as_str()).collect();
        assert_eq!(
            sections,
            ["No collaboration", "LLM assisting CRS", "CRS assisting LLM"]
        );
    }
}
