//! MSGR / MRSGR tables computed from result rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use mima_core::metrics::{mrsgr, msgr_report};
use serde::{Deserialize, Serialize};

use crate::results::{arm, ResultRow, NONE};

/// Gap scores of one method for one `(run, attack, metric)` at the final
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub run_id: String,
    pub group: String,
    pub seed: Option<u64>,
    pub method: String,
    pub attack: String,
    pub metric: String,
    pub msgr: Option<f64>,
    pub mrsgr: Option<f64>,
    /// Target concepts whose unprotected similarity is negative, which
    /// inverts the sign reading of their ratio.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative_denominators: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedGap {
    pub seed: Option<u64>,
    /// Mean over the seed's groups.
    pub msgr: Option<f64>,
    pub mrsgr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Attack step the scores are taken at.
    pub step: Option<usize>,
    pub entries: Vec<GapEntry>,
}

/// Splits `"<group>-s<seed>"`.
pub fn parse_run_id(run_id: &str) -> (String, Option<u64>) {
    match run_id.rsplit_once("-s").and_then(|(g, s)| Some((g, s.parse().ok()?))) {
        Some((g, s)) => (g.to_string(), Some(s)),
        None => (run_id.to_string(), None),
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn percent(x: f64) -> String {
    let p = 100.0 * x;
    if p.abs() < 1e6 || !p.is_finite() {
        format!("{p:.2}")
    } else {
        format!("{p:.2e}")
    }
}

/// Values keyed by concept label, in first-seen order.
type Series = Vec<(String, f64)>;

type CellKey<'a> = (&'a str, &'a str, &'a str, &'a str, &'a str);

fn lookup<'a>(cells: &'a BTreeMap<CellKey<'a>, Series>, key: CellKey<'a>) -> Option<&'a Series> {
    cells.get(&key)
}

impl Summary {
    pub fn from_rows(rows: &[ResultRow]) -> Summary {
        let Some(step) = rows.iter().map(|r| r.step).max() else {
            return Summary::default();
        };
        // (run, method, attack, metric, arm) -> concept values at `step`.
        let mut cells: BTreeMap<CellKey<'_>, Series> = BTreeMap::new();
        let mut order: Vec<(&str, &str, &str, &str)> = Vec::new();
        let mut seen = BTreeSet::new();
        for r in rows.iter().filter(|r| r.step == step) {
            cells
                .entry((&r.run_id, &r.method, &r.attack, &r.metric, &r.arm))
                .or_default()
                .push((r.concept.clone(), r.value));
            let key = (r.run_id.as_str(), r.method.as_str(), r.attack.as_str(), r.metric.as_str());
            if r.method != NONE && seen.insert(key) {
                order.push(key);
            }
        }

        let entries = order
            .into_iter()
            .map(|(run, method, attack, metric)| {
                let (group, seed) = parse_run_id(run);
                let mut entry = GapEntry {
                    run_id: run.into(),
                    group,
                    seed,
                    method: method.into(),
                    attack: attack.into(),
                    metric: metric.into(),
                    msgr: None,
                    mrsgr: None,
                    negative_denominators: Vec::new(),
                    errors: Vec::new(),
                };
                let empty = Vec::new();
                let get = |m, a| lookup(&cells, (run, m, attack, metric, a)).unwrap_or(&empty);
                let targets = |s: &Series| -> Series {
                    s.iter().filter(|(c, _)| !c.starts_with(crate::results::OTHER_PREFIX)).cloned().collect()
                };
                let others = |s: &Series| -> Vec<f64> {
                    s.iter()
                        .filter(|(c, _)| c.starts_with(crate::results::OTHER_PREFIX))
                        .map(|(_, v)| *v)
                        .collect()
                };

                let without = targets(get(NONE, arm::NONE));
                let with = targets(get(method, arm::IMMUNIZED));
                if without.iter().map(|c| &c.0).ne(with.iter().map(|c| &c.0)) {
                    entry.errors.push("msgr: target concepts differ between arms".into());
                } else {
                    let a: Vec<f64> = without.iter().map(|c| c.1).collect();
                    let i: Vec<f64> = with.iter().map(|c| c.1).collect();
                    match msgr_report(&a, &i) {
                        Ok(rep) => {
                            entry.msgr = Some(rep.value);
                            entry.negative_denominators =
                                rep.negative_denominators.iter().map(|&n| without[n].0.clone()).collect();
                        }
                        Err(e) => entry.errors.push(format!("msgr: {e}")),
                    }
                }

                let paired = get(method, arm::PAIRED);
                let other = others(paired);
                if !other.is_empty() {
                    let target: Vec<f64> = targets(paired).iter().map(|c| c.1).collect();
                    match mrsgr(&target, &other) {
                        Ok(v) => entry.mrsgr = Some(v),
                        Err(e) => entry.errors.push(format!("mrsgr: {e}")),
                    }
                }
                entry
            })
            .collect();
        Summary {
            step: Some(step),
            entries,
        }
    }

    fn select<'a>(&'a self, method: &'a str, attack: &'a str, metric: &'a str) -> impl Iterator<Item = &'a GapEntry> {
        self.entries
            .iter()
            .filter(move |e| e.method == method && e.attack == attack && e.metric == metric)
    }

    /// Scores averaged over groups, one entry per seed in first-seen order.
    pub fn per_seed(&self, method: &str, attack: &str, metric: &str) -> Vec<SeedGap> {
        let mut seeds: Vec<Option<u64>> = Vec::new();
        for e in self.select(method, attack, metric) {
            if !seeds.contains(&e.seed) {
                seeds.push(e.seed);
            }
        }
        seeds
            .into_iter()
            .map(|seed| {
                let of_seed: Vec<&GapEntry> = self.select(method, attack, metric).filter(|e| e.seed == seed).collect();
                SeedGap {
                    seed,
                    msgr: mean(of_seed.iter().filter_map(|e| e.msgr)),
                    mrsgr: mean(of_seed.iter().filter_map(|e| e.mrsgr)),
                }
            })
            .collect()
    }

    fn distinct(&self, f: impl Fn(&GapEntry) -> &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            let v = f(e);
            if !out.iter().any(|o| o == v) {
                out.push(v.to_string());
            }
        }
        out
    }

    /// Methods × groups tables of MSGR and MRSGR for every attack and
    /// metric, averaged over seeds, plus per-seed breakdowns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Summary\n");
        let Some(step) = self.step else {
            s.push_str("\nNo results.\n");
            return s;
        };
        let _ = writeln!(s, "\nScores at attack step {step}, in percent.");
        let methods = self.distinct(|e| &e.method);
        let groups = self.distinct(|e| &e.group);
        let seeds: Vec<Option<u64>> = {
            let mut v = Vec::new();
            for e in &self.entries {
                if !v.contains(&e.seed) {
                    v.push(e.seed);
                }
            }
            v
        };
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), percent);
        let seed_name = |s: &Option<u64>| s.map_or_else(|| "?".to_string(), |x| format!("s{x}"));

        for attack in self.distinct(|e| &e.attack) {
            for metric in self.distinct(|e| &e.metric) {
                for (label, pick) in [
                    ("MSGR", (|e: &GapEntry| e.msgr) as fn(&GapEntry) -> Option<f64>),
                    ("MRSGR", |e: &GapEntry| e.mrsgr),
                ] {
                    if !methods
                        .iter()
                        .flat_map(|m| self.select(m, &attack, &metric))
                        .any(|e| pick(e).is_some())
                    {
                        continue;
                    }
                    let _ = writeln!(s, "\n## {label}: {attack} / {metric}\n");
                    let _ = writeln!(s, "| method | {} | mean |", groups.join(" | "));
                    let _ = writeln!(s, "|---|{}---|", "---|".repeat(groups.len()));
                    for m in &methods {
                        let cols: Vec<String> = groups
                            .iter()
                            .map(|g| pct(mean(self.select(m, &attack, &metric).filter(|e| &e.group == g).filter_map(pick))))
                            .collect();
                        let all = pct(mean(self.select(m, &attack, &metric).filter_map(pick)));
                        let _ = writeln!(s, "| {m} | {} | {all} |", cols.join(" | "));
                    }
                    let _ = writeln!(s, "\nPer seed (mean over groups):\n");
                    let _ = writeln!(s, "| method | {} |", seeds.iter().map(seed_name).collect::<Vec<_>>().join(" | "));
                    let _ = writeln!(s, "|---|{}", "---|".repeat(seeds.len()));
                    for m in &methods {
                        let cols: Vec<String> = seeds
                            .iter()
                            .map(|sd| pct(mean(self.select(m, &attack, &metric).filter(|e| &e.seed == sd).filter_map(pick))))
                            .collect();
                        let _ = writeln!(s, "| {m} | {} |", cols.join(" | "));
                    }
                }
                let flagged = self
                    .entries
                    .iter()
                    .filter(|e| e.attack == attack && e.metric == metric && !e.negative_denominators.is_empty())
                    .count();
                if flagged > 0 {
                    let _ = writeln!(
                        s,
                        "\nNote: {flagged} {attack} / {metric} entries have negative unprotected similarities; their MSGR sign reads inverted."
                    );
                }
            }
        }
        let errors: Vec<&GapEntry> = self.entries.iter().filter(|e| !e.errors.is_empty()).collect();
        if !errors.is_empty() {
            s.push_str("\n## Errors\n\n");
            for e in errors {
                let _ = writeln!(s, "- {} {} {} {}: {}", e.run_id, e.method, e.attack, e.metric, e.errors.join("; "));
            }
        }
        s
    }
}
