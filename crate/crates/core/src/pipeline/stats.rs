//! Attrition counts per data source.

use serde::{Deserialize, Serialize};

use super::record::{CotRecord, Status};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub raw: u64,
    pub generated: u64,
    pub filtered: u64,
}

impl Counts {
    pub fn is_monotone(&self) -> bool {
        self.filtered <= self.generated && self.generated <= self.raw
    }

    fn add(&mut self, other: &Counts) {
        self.raw += other.raw;
        self.generated += other.generated;
        self.filtered += other.filtered;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub source: String,
    #[serde(flatten)]
    pub counts: Counts,
}

/// Per-source counts in first-appearance order, plus the total.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub sources: Vec<SourceCounts>,
    pub total: Counts,
}

pub fn compute_stats(records: &[CotRecord]) -> PipelineStats {
    let mut stats = PipelineStats::default();
    for r in records {
        let idx = match stats.sources.iter().position(|s| s.source == r.qa.source) {
            Some(i) => i,
            None => {
                stats.sources.push(SourceCounts { source: r.qa.source.clone(), counts: Counts::default() });
                stats.sources.len() - 1
            }
        };
        let c = Counts {
            raw: 1,
            generated: matches!(r.status, Status::Generated | Status::Retained | Status::Rejected) as u64,
            filtered: (r.status == Status::Retained) as u64,
        };
        stats.sources[idx].counts.add(&c);
        stats.total.add(&c);
    }
    stats
}

impl PipelineStats {
    pub fn is_monotone(&self) -> bool {
        self.total.is_monotone() && self.sources.iter().all(|s| s.counts.is_monotone())
    }

    /// `raw / generated / filtered` over all sources.
    pub fn summary(&self) -> String {
        format!("{} / {} / {}", self.total.raw, self.total.generated, self.total.filtered)
    }

    /// Rows Raw / Generated / Quality Filtered; one column per source then Total.
    pub fn render_table(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend(self.sources.iter().map(|s| s.source.clone()));
        header.push("Total".into());
        let all: Vec<Counts> = self.sources.iter().map(|s| s.counts).chain([self.total]).collect();
        let rows: Vec<Vec<String>> = [
            ("Raw", (|c: &Counts| c.raw) as fn(&Counts) -> u64),
            ("Generated", |c| c.generated),
            ("Quality Filtered", |c| c.filtered),
        ]
        .iter()
        .map(|(name, get)| {
            let mut row = vec![name.to_string()];
            row.extend(all.iter().map(|c| get(c).to_string()));
            row
        })
        .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| std::iter::once(&header).chain(&rows).map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let line =
            |row: &[String]| {
                row.iter()
                    .enumerate()
                    .map(|(i, cell)| {
                        if i == 0 {
                            format!("{cell:<w$}", w = widths[i])
                        } else {
                            format!("{cell:>w$}", w = widths[i])
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
        let mut out = line(&header);
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}
