#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use dpsir_core::circular::{allocate_sectors, optimize_angles, MdsConfig};
use dpsir_core::clock::LogicalClock;
use dpsir_core::cluster::{agglomerative_cluster, same_partition, EmbeddingVector};
use dpsir_core::corpus::{
    fixed_window_segmentation, is_partition, snippets_from_boundaries, validate_segmentation, Conversation, Document,
};
use dpsir_core::engine::Workbench;
use dpsir_core::fixtures::{self, FixtureCorpus};
use dpsir_core::gateway::fixture::FixtureProvider;
use dpsir_core::gateway::Gateway;
use dpsir_core::layout::chart::{build_uncertainty_chart, ChartConfig, ChartInput};
use dpsir_core::layout::dpsir::{build_dpsir_graph, DpsirConfig};
use dpsir_core::pipeline::{apply_rules, LinkResult, Pipeline, SnippetText};
use dpsir_core::taxonomy::{
    Edit, IndicatorKind, Rule, RuleBook, RuleValue, Step, VariableRef, VariableType, VersionStore,
};
use dpsir_core::uncertainty::uncertainty_score;
use proptest::prelude::*;
use proptest::sample::select;

fn document(n: usize) -> Document {
    Document {
        id: "doc".into(),
        title: "doc".into(),
        conversations: (0..n)
            .map(|i| Conversation {
                index: i,
                speaker: "A".into(),
                text: format!("line {i}"),
            })
            .collect(),
        metadata: BTreeMap::new(),
    }
}

fn label_sets() -> impl Strategy<Value = Vec<BTreeSet<u8>>> {
    prop::collection::vec(prop::collection::btree_set(0u8..8, 0..8), 2..6)
}

proptest! {
    #[test]
    fn uncertainty_is_bounded_and_zero_only_on_agreement(sets in label_sets()) {
        let u = uncertainty_score(&sets).unwrap();
        prop_assert!((0.0..=1.0).contains(&u));
        let all_equal = sets.windows(2).all(|w| w[0] == w[1]);
        prop_assert_eq!(u == 0.0, all_equal);
    }

    #[test]
    fn uncertainty_ignores_run_order(sets in label_sets(), seed in any::<u64>()) {
        let mut shuffled = sets.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % (i + 1));
        }
        let a = uncertainty_score(&sets).unwrap();
        let b = uncertainty_score(&shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn fixed_windows_partition_any_document(n in 1usize..60, window in 1usize..20) {
        let doc = document(n);
        let s = fixed_window_segmentation(&doc, window);
        prop_assert!(is_partition(&doc, &s));
        prop_assert!(s.iter().all(|s| s.fallback && s.start() <= s.end()));
    }

    #[test]
    fn valid_boundaries_partition_the_document(n in 1usize..60, cuts in prop::collection::btree_set(1usize..60, 0..10)) {
        let doc = document(n);
        let mut starts = vec![0usize];
        starts.extend(cuts.into_iter().filter(|&c| c < n));
        let raw: Vec<i64> = starts.iter().map(|&s| s as i64).collect();
        prop_assert!(validate_segmentation(&doc, &raw).is_ok());
        prop_assert!(is_partition(&doc, &snippets_from_boundaries(&doc, &starts, &[])));
    }

    #[test]
    fn invalid_boundaries_are_reported(n in 2usize..30, raw in prop::collection::vec(-3i64..40, 0..8)) {
        let doc = document(n);
        let valid = raw.first() == Some(&0)
            && raw.windows(2).all(|w| w[0] < w[1])
            && raw.iter().all(|&b| b >= 0 && (b as usize) < n);
        prop_assert_eq!(validate_segmentation(&doc, &raw).is_ok(), valid);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Fork { parent: usize, edit: u8, name: u8 },
    Fresh,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            3 => (any::<usize>(), 0u8..4, 0u8..6).prop_map(|(parent, edit, name)| Op::Fork { parent, edit, name }),
            1 => Just(Op::Fresh),
        ],
        1..25,
    )
}

fn edit(kind: u8, name: u8) -> Edit {
    let indicator = IndicatorKind::ALL[name as usize % 5];
    match kind {
        0 => Edit::AddVariable {
            indicator,
            name: format!("var-{name}"),
            definition: format!("definition {name}"),
            variable_type: VariableType::Societal,
        },
        1 => Edit::RemoveVariable {
            indicator,
            name: format!("var-{name}"),
        },
        2 => Edit::AppendIndicatorDefinition {
            indicator,
            text: format!(" note {name}"),
        },
        _ => Edit::SetIndicatorDefinition {
            indicator,
            definition: format!("redefined {name}"),
        },
    }
}

proptest! {
    #[test]
    fn versions_are_immutable_and_lineage_terminates(ops in ops()) {
        let mut store = VersionStore::new(Arc::new(LogicalClock::default()));
        let mut snapshots: Vec<(String, String)> = Vec::new();
        for op in ops {
            let created = match op {
                Op::Fresh => store.create_version(Step::IndicatorId, None, &[]),
                Op::Fork { parent, edit: e, name } if !snapshots.is_empty() => {
                    let pid = snapshots[parent % snapshots.len()].0.clone();
                    store.create_version(Step::IndicatorId, Some(&pid), &[edit(e, name)])
                }
                Op::Fork { .. } => store.create_version(Step::IndicatorId, None, &[]),
            };
            // Removing an absent variable is rejected; the store must be unchanged then.
            if let Ok(v) = created {
                snapshots.push((v.id.clone(), serde_json::to_string(&v).unwrap()));
            }
        }
        prop_assert_eq!(store.iter().count(), snapshots.len());
        for (id, bytes) in &snapshots {
            let now = serde_json::to_string(store.get(id).unwrap()).unwrap();
            prop_assert_eq!(&now, bytes);
            let lineage = store.lineage(id).unwrap();
            prop_assert_eq!(&lineage[0], id);
            prop_assert!(store.get(lineage.last().unwrap()).unwrap().parent_id.is_none());
        }
    }
}

fn fixture_workbench() -> &'static (tempfile::TempDir, Workbench) {
    static WB: OnceLock<(tempfile::TempDir, Workbench)> = OnceLock::new();
    WB.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = FixtureCorpus::read_dir(&fixtures::shipped_dir()).unwrap();
        let rt = tokio::runtime::Runtime::new().unwrap();
        let wb = rt
            .block_on(fixtures::run_fixture_pipeline(&corpus, dir.path()))
            .unwrap();
        (dir, wb)
    })
}

fn rule_strategy() -> impl Strategy<Value = Rule> {
    let snippets: Vec<String> = (1..=12).map(|d| format!("island-{d:02}#0")).collect();
    let variables = vec![
        VariableRef::new(IndicatorKind::Driver, "livelihood"),
        VariableRef::new(IndicatorKind::Pressure, "overfishing"),
        VariableRef::new(IndicatorKind::State, "fish-stock"),
        VariableRef::new(IndicatorKind::Impact, "income-change"),
        VariableRef::new(IndicatorKind::Response, "cleanup"),
    ];
    let value = prop_oneof![
        select(IndicatorKind::ALL.to_vec()).prop_map(|indicator| RuleValue::Indicator { indicator }),
        select(variables.clone()).prop_map(|variable| RuleValue::Variable { variable }),
        (select(variables.clone()), select(variables)).prop_map(|(source, target)| RuleValue::Link { source, target }),
    ];
    (select(snippets), value, any::<bool>()).prop_map(|(sid, value, have)| {
        if have {
            Rule::must_have(sid, value)
        } else {
            Rule::must_not_have(sid, value)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rules_are_idempotent(rules in prop::collection::vec(rule_strategy(), 0..8)) {
        let (_, wb) = fixture_workbench();
        let mut book = RuleBook::new();
        for r in rules {
            let _ = book.add(r);
        }
        for v in [fixtures::V_INDICATORS, fixtures::V_VARIABLES, fixtures::V_LINKS] {
            let raw = wb.raw_results(v).unwrap();
            let version = wb.version(v).unwrap();
            let (once, _) = apply_rules(&raw, &book, version);
            let (twice, _) = apply_rules(&once, &book, version);
            prop_assert_eq!(&once, &twice);
            for rs in &raw.runsets {
                prop_assert!(rs.label_sets.iter().all(|set| set.is_subset(&rs.aggregate.labels)));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn batches_complete_and_respect_backpressure(n in 1usize..12, k in 1usize..5, max_in_flight in 1usize..6) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let mut versions = VersionStore::new(Arc::new(LogicalClock::default()));
        let v = versions.create_version(Step::IndicatorId, None, &[]).unwrap();
        let provider = Arc::new(
            FixtureProvider::empty()
                .with_latency(Duration::from_millis(2))
                .with_max_in_flight(max_in_flight),
        );
        let snippets: Vec<SnippetText> = (0..n)
            .map(|i| SnippetText { id: format!("s{i:02}"), text: format!("snippet number {i}") })
            .collect();
        let pipeline = Pipeline::new(Gateway::new(provider.clone()), k);
        let result = rt.block_on(pipeline.identify_indicators(&v, &snippets)).unwrap();
        prop_assert_eq!(provider.calls(), n * k);
        prop_assert!(provider.peak_in_flight() <= max_in_flight);
        prop_assert_eq!(result.runsets.len(), n);
        prop_assert!(result.runsets.iter().all(|r| r.label_sets.len() == k));
        let ids: Vec<&str> = result.runsets.iter().map(|r| r.snippet_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        prop_assert_eq!(ids, sorted);
    }
}

fn symmetric(n: usize, raw: &[f64]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; n]; n];
    let mut it = raw.iter().cycle();
    for i in 0..n {
        for j in i + 1..n {
            let v = *it.next().unwrap();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn best_objective_never_worsens_with_more_restarts(n in 3usize..10, raw in prop::collection::vec(0.0f64..2.0, 1..45), seed in any::<u64>()) {
        let d = symmetric(n, &raw);
        let mut last = f64::INFINITY;
        for restarts in 1..=5 {
            let sol = optimize_angles(&d, &MdsConfig { restarts, seed, ..MdsConfig::default() });
            prop_assert!(sol.objective >= 0.0);
            prop_assert!(sol.thetas.iter().all(|t| (0.0..TAU).contains(t)));
            prop_assert!(sol.objective <= last + 1e-12);
            last = sol.objective;
        }
    }

    #[test]
    fn clustering_is_deterministic(raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 2..14), threshold in 0.1f64..0.9) {
        let vectors: Vec<EmbeddingVector> = raw
            .into_iter()
            .enumerate()
            .map(|(i, mut v)| {
                v[0] += 1.5;
                EmbeddingVector { snippet_id: format!("s{i:02}"), values: v }
            })
            .collect();
        let a = agglomerative_cluster(&vectors, threshold, false).unwrap();
        let b = agglomerative_cluster(&vectors, threshold, true).unwrap();
        let mut reversed = vectors.clone();
        reversed.reverse();
        let c = agglomerative_cluster(&reversed, threshold, false).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(same_partition(&a, &c));
        prop_assert_eq!(a.assignment.len(), vectors.len());
        prop_assert!(a.clusters.values().all(|m| !m.is_empty()));
    }
}

fn chart_inputs() -> impl Strategy<Value = Vec<ChartInput>> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..TAU, 0usize..4), 1..40).prop_map(|nodes| {
        nodes
            .into_iter()
            .enumerate()
            .map(|(i, (uncertainty, theta, cluster_id))| ChartInput {
                snippet_id: format!("s{i:03}"),
                uncertainty,
                theta,
                cluster_id,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chart_is_deterministic_contained_and_monotone(inputs in chart_inputs()) {
        let mut members: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for i in &inputs {
            members.entry(i.cluster_id).or_default().push(i.theta);
        }
        let alloc = allocate_sectors(&members, 2f64.to_radians());
        let config = ChartConfig::default();
        let a = build_uncertainty_chart(&inputs, &alloc, &BTreeMap::new(), &config);
        let b = build_uncertainty_chart(&inputs, &alloc, &BTreeMap::new(), &config);
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        prop_assert!(a.contained());
        let mut by_u: Vec<_> = a.nodes.iter().map(|n| (n.uncertainty, n.radius_target)).collect();
        by_u.sort_by(|x, y| x.0.total_cmp(&y.0));
        for w in by_u.windows(2) {
            if w[1].0 > w[0].0 {
                prop_assert!(w[1].1 > w[0].1);
            }
        }
    }

    #[test]
    fn dpsir_encodings_are_monotone(seeds in prop::collection::vec((0usize..15, 0usize..15, 0usize..6), 0..60), hidden in prop::collection::btree_set(select(IndicatorKind::ALL.to_vec()), 0..3)) {
        let vars: Vec<VariableRef> = IndicatorKind::ALL
            .iter()
            .flat_map(|k| (0..3).map(move |i| VariableRef::new(*k, format!("v{i}"))))
            .collect();
        let links: Vec<LinkResult> = seeds
            .into_iter()
            .filter(|(a, b, _)| a != b)
            .map(|(a, b, s)| LinkResult {
                snippet_id: format!("s{s}"),
                source: vars[a].clone(),
                target: vars[b].clone(),
                relationship: String::new(),
                evidence: vec![],
                explanation: String::new(),
                uncertainty: 0.0,
                support: 1.0,
                rule_override: None,
            })
            .collect();
        let visible: BTreeSet<IndicatorKind> = IndicatorKind::ALL.into_iter().filter(|k| !hidden.contains(k)).collect();
        let g = build_dpsir_graph(&links, &vars, &visible, &visible, &DpsirConfig::default());
        let total: f64 = g.blocks.iter().map(|b| b.sector.span()).sum();
        prop_assert!((total - TAU).abs() <= 1e-9);
        let mut edges = g.edges.clone();
        edges.sort_by_key(|e| e.intensity);
        prop_assert!(edges.windows(2).all(|w| w[0].width <= w[1].width));
        prop_assert!(edges.iter().all(|e| (0.0..=1.0).contains(&e.opacity)));
        for b in &g.blocks {
            let mut cells = b.cells.clone();
            cells.sort_by_key(|c| c.degree);
            prop_assert!(cells.windows(2).all(|w| w[0].saturation <= w[1].saturation));
        }
    }
}
