//! Markdown rendering of per-round reports: accumulated trajectory-set
//! quality, per-task-type success, held-out evaluations, and dataset
//! sentence statistics.

use std::collections::BTreeSet;

use super::{MetricBlock, RoundReport};

/// Column header shared by the reward-quality tables.
pub const QUALITY_HEADER: &str =
    "| Round | Reward R (x100) | Success Rate (%) | %{R >= 0.75} | %{R >= 0.5} |";

fn quality_table<'a>(
    out: &mut String,
    rows: impl Iterator<Item = (u32, Option<&'a MetricBlock>)>,
) {
    out.push_str(QUALITY_HEADER);
    out.push_str("\n|---|---|---|---|---|\n");
    for (round, m) in rows {
        match m {
            Some(m) => out.push_str(&format!(
                "| {round} | {:.1} | {:.1} | {:.1} | {:.1} |\n",
                m.mean_reward, m.success_rate, m.pct_reward_ge_075, m.pct_reward_ge_05
            )),
            None => out.push_str(&format!("| {round} | - | - | - | - |\n")),
        }
    }
    out.push('\n');
}

pub fn render_markdown(env_id: &str, reports: &[RoundReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Closed-loop run report ({env_id})\n\n"));

    out.push_str("## Accumulated trajectory-set quality (train)\n\n");
    quality_table(
        &mut out,
        reports
            .iter()
            .map(|r| (r.round, r.splits.get("train").map(|s| &s.accumulated.overall))),
    );

    let types: BTreeSet<String> = reports
        .iter()
        .filter_map(|r| r.splits.get("train"))
        .flat_map(|s| s.accumulated.by_type.keys().cloned())
        .collect();
    if !types.is_empty() {
        out.push_str("## Accumulated success rate by task type (train)\n\n");
        out.push_str("| Round |");
        for ty in &types {
            out.push_str(&format!(" {ty} |"));
        }
        out.push_str(" Total |\n|---|");
        for _ in &types {
            out.push_str("---|");
        }
        out.push_str("---|\n");
        for r in reports {
            let Some(split) = r.splits.get("train") else {
                continue;
            };
            out.push_str(&format!("| {} |", r.round));
            for ty in &types {
                match split.accumulated.by_type.get(ty) {
                    Some(m) => out.push_str(&format!(" {:.1} |", m.success_rate)),
                    None => out.push_str(" - |"),
                }
            }
            out.push_str(&format!(
                " {:.1} |\n",
                split.accumulated.overall.success_rate
            ));
        }
        out.push('\n');
    }

    for (title, split, accumulated) in [
        ("Single-shot evaluation (valid)", "valid", false),
        ("Single-shot evaluation (test)", "test", false),
        ("Accumulated evaluation (valid)", "valid", true),
        ("Accumulated evaluation (test)", "test", true),
    ] {
        if reports.iter().all(|r| !r.splits.contains_key(split)) {
            continue;
        }
        out.push_str(&format!("## {title}\n\n"));
        quality_table(
            &mut out,
            reports.iter().map(|r| {
                let m = r.splits.get(split).map(|s| {
                    if accumulated {
                        &s.accumulated.overall
                    } else {
                        &s.single_shot.overall
                    }
                });
                (r.round, m)
            }),
        );
    }

    out.push_str("## Training dataset sentence statistics\n\n");
    out.push_str("| Round | #Total | #Failed | #Failed/#Total (%) |\n|---|---|---|---|\n");
    for r in reports {
        out.push_str(&format!(
            "| {} | {} | {} | {:.1} |\n",
            r.round,
            r.dataset.total_sequences,
            r.dataset.failed_sequences,
            100.0 * r.dataset.failed_ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::DatasetStats;
    use crate::orchestrator::{SplitMetrics, SplitReport};
    use std::collections::BTreeMap;

    fn block(v: f64) -> MetricBlock {
        MetricBlock {
            mean_reward: v,
            success_rate: v,
            pct_reward_ge_075: v,
            pct_reward_ge_05: v,
        }
    }

    fn split(v: f64) -> SplitReport {
        let metrics = SplitMetrics {
            overall: block(v),
            by_type: BTreeMap::from([("fetch".to_string(), block(v))]),
        };
        SplitReport {
            single_shot: metrics.clone(),
            accumulated: metrics,
        }
    }

    #[test]
    fn markdown_has_the_quality_column_layout() {
        let reports = vec![RoundReport {
            round: 0,
            splits: BTreeMap::from([
                ("train".to_string(), split(82.0)),
                ("test".to_string(), split(40.0)),
            ]),
            dataset: DatasetStats {
                total_sequences: 981,
                failed_sequences: 0,
                failed_ratio: 0.0,
            },
        }];
        let md = render_markdown("mini_shop", &reports);
        assert!(md.contains(QUALITY_HEADER));
        assert!(md.contains("| 0 | 82.0 | 82.0 | 82.0 | 82.0 |"));
        assert!(md.contains("| Round | fetch | Total |"));
        assert!(md.contains("| 0 | 981 | 0 | 0.0 |"));
    }
}
