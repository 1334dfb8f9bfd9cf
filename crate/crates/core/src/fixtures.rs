//! Bundled synthetic corpus: twelve interview transcripts from a fictional
//! island, an answer key, and the keyed provider replies that make the whole
//! pipeline run offline.
//!
//! The replies are produced by driving the real pipeline against a provider
//! that is filled in step by step, so every stored prompt hash is exactly
//! the one the engine later issues. A shipped copy lives in
//! `crates/core/fixtures/island`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cluster::topic_sample;
use crate::corpus::{parse_transcript, validate_segmentation, Document};
use crate::engine::{cluster_result, misc_evidence, ClockKind, EngineConfig, EngineError, LayoutRequest, Workbench};
use crate::gateway::fixture::{FixtureProvider, FixtureSet};
use crate::gateway::Prompt;
use crate::layout::LayoutKind;
use crate::pipeline::{prompts, PipelineError};
use crate::store::Workspace;
use crate::taxonomy::{Edit, IndicatorKind, Step, TaxonomyVersion, Variable, VariableRef, VariableType, MISCELLANEOUS};

pub const FIXTURE_SEED: u64 = 0;
pub const FIXTURE_K: usize = 5;
pub const FIXTURE_EMBEDDING_DIM: usize = 256;

/// Version ids created by [`create_fixture_versions`].
pub const V_INDICATORS: &str = "v1";
pub const V_VARIABLES: &str = "v2";
pub const V_LINKS: &str = "v3";
pub const V_VARIABLES_FORK: &str = "v4";
pub const V_LINKS_FORK: &str = "v5";

/// Snippets scripted to disagree across the indicator runs.
pub const SCRIPTED_TWO_THIRDS: &str = "island-07#0";
pub const SCRIPTED_FOUR_FIFTHS: &str = "island-05#0";
pub const SCRIPTED_ONE_HALF: &str = "island-03#0";
/// The snippet with four identified variables.
pub const FOUR_VARIABLE_SNIPPET: &str = "island-01#0";
/// Document whose first segmentation reply is rejected.
pub const REPAIRED_DOCUMENT: &str = "island-02";
pub const VENDOR_TOPIC: &str = "Little Vendor Dream";

const INTERVIEWER: &str = "Interviewer";

pub fn questions() -> Vec<String> {
    [
        "What do you do for a living?",
        "How has the island changed?",
        "What do you hope for the future?",
    ]
    .map(str::to_owned)
    .to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    Vendor,
    Fishing,
    Reef,
    Trash,
    Tourism,
    Conservation,
}

impl Theme {
    pub fn topic(self) -> &'static str {
        match self {
            Theme::Vendor => VENDOR_TOPIC,
            Theme::Fishing => "Shrinking Catch",
            Theme::Reef => "Reef Damage",
            Theme::Trash => "Garbage On Beaches",
            Theme::Tourism => "Crowded Tourist Seasons",
            Theme::Conservation => "Protected Waters",
        }
    }

    fn explanation(self) -> &'static str {
        match self {
            Theme::Vendor => "Hopes for a little vendor stall or kiosk: a small family shop selling snacks, a personal dream of self employment and making a living through a tiny business of their own.",
            Theme::Fishing => "Fishing as a household livelihood under strain: heavy fishing effort, many boats, shrinking catches and declining fish populations along the coast.",
            Theme::Reef => "Coral reef damage from anchors and boats: broken, pale coral, degraded underwater habitat and lost reef beauty.",
            Theme::Trash => "Garbage pollution: plastic, bottles, litter and waste washing ashore or left behind on beaches and harbor water.",
            Theme::Tourism => "Tourism growth: crowds of visitors arriving by ferry, busy guesthouses, packed streets and strong summer tourist demand.",
            Theme::Conservation => "Conservation measures: a protected marine area, fishing restrictions, rangers, volunteers and recovery of marine life.",
        }
    }
}

struct DocPlan {
    id: &'static str,
    resident: &'static str,
    /// `(resident speaks, text)`.
    lines: &'static [(bool, &'static str)],
    starts: &'static [usize],
    topics: &'static [&'static str],
}

use IndicatorKind::{Driver as D, Impact as I, Pressure as P, Response as R, State as S};

struct SnippetPlan {
    id: &'static str,
    theme: Theme,
    evidence: &'static [&'static str],
    /// Indicator letters per run when the runs are scripted to disagree.
    runs: Option<&'static [&'static str]>,
    variables: &'static [(IndicatorKind, &'static str)],
    /// `(source, target, relationship)` by variable name.
    links: &'static [(&'static str, &'static str, &'static str)],
    keywords: &'static [&'static str],
}

const DOCS: &[DocPlan] = &[
    DocPlan {
        id: "island-01",
        resident: "R01",
        lines: &[
            (false, "How long have you fished around the island?"),
            (true, "My family has fished here for three generations, it is how we feed the kids."),
            (true, "These days the nets come back nearly empty because everyone is fishing too much, and we earn far less money."),
            (false, "What about the reef near the harbor?"),
            (true, "Dive boats drop their anchors right on the coral and the reef is broken in many places now."),
            (true, "The broken reef looks grey and dead, it is not beautiful any more."),
        ],
        starts: &[0, 3],
        topics: &["family fishing", "reef near the harbor"],
    },
    DocPlan {
        id: "island-02",
        resident: "R02",
        lines: &[
            (false, "What do you hope to do in the future?"),
            (true, "I dream of opening a little vendor stall by the pier and selling snacks to the visitors."),
            (false, "Is that hard to start?"),
            (true, "Rent near the pier is high, but a small shop would let my family earn money here instead of moving away."),
            (true, "More visitors come every summer, so I think a stall would do well."),
        ],
        starts: &[0, 2],
        topics: &["vendor stall dream", "starting a shop"],
    },
    DocPlan {
        id: "island-03",
        resident: "R03",
        lines: &[
            (false, "How has tourism changed the village?"),
            (true, "Every weekend the ferry brings crowds of tourists and the village streets are packed."),
            (true, "We need the visitors, our guesthouse depends on them."),
            (false, "And the beaches?"),
            (true, "The crowds leave garbage everywhere, bottles and plastic bags all over the sand."),
            (true, "Some of us volunteer for a beach cleanup every Sunday morning."),
            (true, "The garbage makes the beach ugly and the visitors complain."),
        ],
        starts: &[0, 3],
        topics: &["weekend crowds", "beach garbage"],
    },
    DocPlan {
        id: "island-04",
        resident: "R04",
        lines: &[
            (false, "You guide divers, what do you see underwater?"),
            (true, "When boats anchor on the reef the coral breaks apart and the fish hide elsewhere."),
            (true, "I ask captains to use the mooring buoys instead of dropping anchors."),
            (true, "Without healthy coral the divers will stop coming and my income drops."),
        ],
        starts: &[0],
        topics: &["diving and anchors"],
    },
    DocPlan {
        id: "island-05",
        resident: "R05",
        lines: &[
            (false, "Is fishing still a good living?"),
            (true, "We still need the sea to live, but the big boats from outside take everything and the fish are fewer each year."),
            (false, "Thank you for your time."),
        ],
        starts: &[0],
        topics: &["outside boats"],
    },
    DocPlan {
        id: "island-06",
        resident: "R06",
        lines: &[
            (false, "What did you do before the shop?"),
            (true, "I sold grilled squid from a cart, and my little vendor dream is a real shop with a roof."),
            (true, "My daughter helps me count the money every night."),
            (false, "Have you seen changes in the ocean?"),
            (true, "The water near the harbor smells and there is plastic floating everywhere, garbage from the boats."),
        ],
        starts: &[0, 3],
        topics: &["squid cart", "harbor water"],
    },
    DocPlan {
        id: "island-07",
        resident: "R07",
        lines: &[
            (false, "How is the catch this year?"),
            (true, "I fish to support my parents, but there are too many boats chasing the same schools."),
            (true, "The flying fish season was short and the schools are smaller."),
            (false, "Does the government help?"),
            (true, "They made a protected area on the east coast where nobody may fish."),
            (true, "Since then the fish have started to come back there."),
        ],
        starts: &[0, 3],
        topics: &["short season", "east coast protection"],
    },
    DocPlan {
        id: "island-08",
        resident: "R08",
        lines: &[
            (false, "How many guests do you get?"),
            (true, "In summer the island is full, the tourists queue for the ferry for hours."),
            (false, "Is that good for you?"),
            (true, "The guesthouse earns more than fishing ever did, my income doubled."),
        ],
        starts: &[0, 2],
        topics: &["summer queues", "guesthouse income"],
    },
    DocPlan {
        id: "island-09",
        resident: "R09",
        lines: &[
            (false, "What would you change about your life here?"),
            (true, "I want a little vendor kiosk selling shaved ice near the lighthouse."),
            (true, "It is my dream, a small family business so my son can stay on the island."),
        ],
        starts: &[0],
        topics: &["shaved ice kiosk"],
    },
    DocPlan {
        id: "island-10",
        resident: "R10",
        lines: &[
            (false, "What was the island like when you were young?"),
            (true, "The reef was full of colour and we caught lobster by hand."),
            (true, "Now the coral is pale and the lobster are gone."),
            (false, "Why do you think it changed?"),
            (true, "Too many dive boats and too much anchoring over the years."),
            (true, "And the typhoons are stronger than before."),
            (false, "Do the young people care?"),
            (true, "Some students organise a beach cleanup and teach visitors about the reef."),
        ],
        starts: &[0, 3, 6],
        topics: &["the old reef", "causes of decline", "young volunteers"],
    },
    DocPlan {
        id: "island-11",
        resident: "R11",
        lines: &[
            (false, "Do you take tourists to dive sites?"),
            (true, "Yes, every morning, and there are many boats at the same site."),
            (true, "We use the mooring buoys now because the park rangers fine anyone who anchors."),
            (false, "Anything else worrying you?"),
            (true, "Garbage washes up from the sea after every storm, plastic bottles and fishing nets."),
        ],
        starts: &[0, 3],
        topics: &["busy dive sites", "storm garbage"],
    },
    DocPlan {
        id: "island-12",
        resident: "R12",
        lines: &[
            (false, "What do your students say about the environment?"),
            (true, "They worry the fish will disappear, so we joined the campaign for a bigger protected area."),
            (true, "The fishermen were angry at first because they lost fishing grounds and income."),
            (true, "Now some of them work as guides in the protected area."),
        ],
        starts: &[0],
        topics: &["protected area campaign"],
    },
];

const SNIPPETS: &[SnippetPlan] = &[
    SnippetPlan {
        id: "island-01#0",
        theme: Theme::Fishing,
        evidence: &[
            "it is how we feed the kids",
            "the nets come back nearly empty because everyone is fishing too much",
            "we earn far less money",
        ],
        runs: None,
        variables: &[
            (D, "livelihood"),
            (P, "overfishing"),
            (S, "fish-stock"),
            (I, "income-change"),
        ],
        links: &[
            (
                "livelihood",
                "overfishing",
                "the need to feed the family keeps everyone fishing",
            ),
            ("overfishing", "fish-stock", "too much fishing empties the nets"),
            ("fish-stock", "income-change", "smaller catches bring in less money"),
        ],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-01#1",
        theme: Theme::Reef,
        evidence: &[
            "Dive boats drop their anchors right on the coral",
            "the reef is broken in many places now",
            "it is not beautiful any more",
        ],
        runs: None,
        variables: &[(P, "anchoring"), (S, "habitat-change"), (I, "scenery-loss")],
        links: &[
            ("anchoring", "habitat-change", "anchors break the coral"),
            ("habitat-change", "scenery-loss", "a broken reef is no longer beautiful"),
        ],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-02#0",
        theme: Theme::Vendor,
        evidence: &["I dream of opening a little vendor stall by the pier"],
        runs: None,
        variables: &[(D, "livelihood")],
        links: &[],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-02#1",
        theme: Theme::Vendor,
        evidence: &[
            "a small shop would let my family earn money here",
            "More visitors come every summer",
        ],
        runs: None,
        variables: &[(D, "livelihood"), (D, "tourism-demand")],
        links: &[],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-03#0",
        theme: Theme::Tourism,
        evidence: &[
            "the ferry brings crowds of tourists and the village streets are packed",
            "We need the visitors",
        ],
        runs: Some(&["D", "DP", "P", "D", "D"]),
        variables: &[(D, "tourism-demand"), (P, "tourist-crowding")],
        links: &[("tourism-demand", "tourist-crowding", "more visitors pack the streets")],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-03#1",
        theme: Theme::Trash,
        evidence: &[
            "The crowds leave garbage everywhere, bottles and plastic bags all over the sand",
            "Some of us volunteer for a beach cleanup every Sunday morning",
            "The garbage makes the beach ugly",
        ],
        runs: None,
        variables: &[(P, "garbage"), (I, "scenery-loss"), (R, "beach-cleanup")],
        links: &[
            ("garbage", "scenery-loss", "garbage makes the beach ugly"),
            ("beach-cleanup", "garbage", "volunteers pick up the garbage"),
        ],
        keywords: &["garbage", "plastic bags", "bottles"],
    },
    SnippetPlan {
        id: "island-04#0",
        theme: Theme::Reef,
        evidence: &[
            "When boats anchor on the reef the coral breaks apart",
            "use the mooring buoys instead of dropping anchors",
            "the divers will stop coming and my income drops",
        ],
        runs: None,
        variables: &[
            (P, "anchoring"),
            (S, "habitat-change"),
            (I, "income-change"),
            (R, MISCELLANEOUS),
        ],
        links: &[
            ("anchoring", "habitat-change", "anchoring breaks the coral apart"),
            (
                "habitat-change",
                "income-change",
                "without healthy coral the divers stop coming",
            ),
        ],
        keywords: &["mooring buoys", "captains"],
    },
    SnippetPlan {
        id: "island-05#0",
        theme: Theme::Fishing,
        evidence: &[
            "We still need the sea to live",
            "the big boats from outside take everything",
            "the fish are fewer each year",
        ],
        runs: Some(&["D", "D", "P", "P", "S"]),
        variables: &[(D, "livelihood"), (P, "overfishing"), (S, "fish-stock")],
        links: &[(
            "overfishing",
            "fish-stock",
            "outside boats take everything and the fish get fewer",
        )],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-06#0",
        theme: Theme::Vendor,
        evidence: &["my little vendor dream is a real shop with a roof"],
        runs: None,
        variables: &[(D, "livelihood")],
        links: &[],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-06#1",
        theme: Theme::Trash,
        evidence: &["there is plastic floating everywhere, garbage from the boats"],
        runs: None,
        variables: &[(P, "garbage"), (S, "habitat-change")],
        links: &[("garbage", "habitat-change", "floating garbage fouls the harbor water")],
        keywords: &["garbage", "plastic", "harbor"],
    },
    SnippetPlan {
        id: "island-07#0",
        theme: Theme::Fishing,
        evidence: &[
            "I fish to support my parents",
            "there are too many boats chasing the same schools",
            "the schools are smaller",
        ],
        runs: Some(&["D", "D", "P", "DP", "PS"]),
        variables: &[(D, "livelihood"), (P, "overfishing"), (S, "fish-stock")],
        links: &[
            ("livelihood", "overfishing", "supporting the family drives more fishing"),
            ("overfishing", "fish-stock", "too many boats shrink the schools"),
        ],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-07#1",
        theme: Theme::Conservation,
        evidence: &[
            "They made a protected area on the east coast where nobody may fish",
            "the fish have started to come back there",
        ],
        runs: None,
        variables: &[(R, "protected-area"), (S, "fish-stock")],
        links: &[("protected-area", "fish-stock", "fish return inside the protected area")],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-08#0",
        theme: Theme::Tourism,
        evidence: &["In summer the island is full, the tourists queue for the ferry for hours"],
        runs: None,
        variables: &[(D, "tourism-demand"), (P, "tourist-crowding")],
        links: &[(
            "tourism-demand",
            "tourist-crowding",
            "summer demand fills the ferry queues",
        )],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-08#1",
        theme: Theme::Tourism,
        evidence: &["The guesthouse earns more than fishing ever did, my income doubled"],
        runs: None,
        variables: &[(D, "tourism-demand"), (I, "income-change")],
        links: &[("tourism-demand", "income-change", "guests doubled the household income")],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-09#0",
        theme: Theme::Vendor,
        evidence: &[
            "I want a little vendor kiosk selling shaved ice",
            "a small family business so my son can stay on the island",
        ],
        runs: None,
        variables: &[(D, "livelihood")],
        links: &[],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-10#0",
        theme: Theme::Reef,
        evidence: &[
            "The reef was full of colour",
            "Now the coral is pale and the lobster are gone",
        ],
        runs: None,
        variables: &[(S, "habitat-change"), (S, "fish-stock")],
        links: &[("habitat-change", "fish-stock", "pale coral holds no lobster")],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-10#1",
        theme: Theme::Reef,
        evidence: &[
            "Too many dive boats and too much anchoring over the years",
            "the typhoons are stronger than before",
        ],
        runs: None,
        variables: &[(P, "anchoring"), (P, MISCELLANEOUS), (S, "habitat-change")],
        links: &[("anchoring", "habitat-change", "years of anchoring wore the reef down")],
        keywords: &["typhoons", "storms"],
    },
    SnippetPlan {
        id: "island-10#2",
        theme: Theme::Conservation,
        evidence: &["Some students organise a beach cleanup and teach visitors about the reef"],
        runs: None,
        variables: &[(R, "beach-cleanup")],
        links: &[],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-11#0",
        theme: Theme::Tourism,
        evidence: &[
            "there are many boats at the same site",
            "the park rangers fine anyone who anchors",
        ],
        runs: None,
        variables: &[(P, "tourist-crowding"), (R, "protected-area")],
        links: &[],
        keywords: &[],
    },
    SnippetPlan {
        id: "island-11#1",
        theme: Theme::Trash,
        evidence: &["Garbage washes up from the sea after every storm, plastic bottles and fishing nets"],
        runs: None,
        variables: &[(P, "garbage")],
        links: &[],
        keywords: &["garbage", "plastic bottles", "fishing nets"],
    },
    SnippetPlan {
        id: "island-12#0",
        theme: Theme::Conservation,
        evidence: &[
            "They worry the fish will disappear",
            "we joined the campaign for a bigger protected area",
            "they lost fishing grounds and income",
        ],
        runs: None,
        variables: &[(R, "protected-area"), (S, "fish-stock"), (I, "income-change")],
        links: &[
            (
                "protected-area",
                "fish-stock",
                "the protected area keeps the fish from disappearing",
            ),
            (
                "protected-area",
                "income-change",
                "closed fishing grounds cost the fishermen income",
            ),
        ],
        keywords: &[],
    },
];

/// `(indicator, name, definition, type)` added to the variable version.
const BASE_VARIABLES: &[(IndicatorKind, &str, &str, VariableType)] = &[
    (
        D,
        "livelihood",
        "The need to earn a living and support a family on the island.",
        VariableType::Societal,
    ),
    (
        D,
        "tourism-demand",
        "Visitors wanting to come to the island for holidays, diving and sightseeing.",
        VariableType::Societal,
    ),
    (
        P,
        "overfishing",
        "Fishing effort beyond what local fish populations can sustain.",
        VariableType::Societal,
    ),
    (
        P,
        "anchoring",
        "Boats dropping anchors onto reefs and the seabed.",
        VariableType::Societal,
    ),
    (
        P,
        "tourist-crowding",
        "Large numbers of visitors in the same places at the same time.",
        VariableType::Societal,
    ),
    (
        S,
        "fish-stock",
        "Abundance of fish and other catch around the island.",
        VariableType::Environmental,
    ),
    (
        S,
        "habitat-change",
        "Change in the condition of coral reefs and coastal habitats.",
        VariableType::Environmental,
    ),
    (
        I,
        "income-change",
        "Change in what residents earn.",
        VariableType::Societal,
    ),
    (
        I,
        "scenery-loss",
        "Loss of natural beauty that residents and visitors value.",
        VariableType::Societal,
    ),
    (
        R,
        "protected-area",
        "Marine areas where fishing or anchoring is restricted.",
        VariableType::Societal,
    ),
    (
        R,
        "beach-cleanup",
        "Organised collection of litter from beaches and shores.",
        VariableType::Societal,
    ),
];

/// Added in the forked variable version.
const FORK_VARIABLE: (IndicatorKind, &str, &str, VariableType) = (
    P,
    "garbage",
    "Litter and waste dropped on land or washed up from the sea.",
    VariableType::Societal,
);

fn add_variable(v: &(IndicatorKind, &str, &str, VariableType)) -> Edit {
    Edit::AddVariable {
        indicator: v.0,
        name: v.1.to_owned(),
        definition: v.2.to_owned(),
        variable_type: v.3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyedLink {
    pub source: VariableRef,
    pub target: VariableRef,
    pub relationship: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedSnippet {
    pub snippet_id: String,
    pub document_id: String,
    pub conversation_range: [usize; 2],
    pub theme: Theme,
    /// Indicator labels of each of the `k` runs; one entry when consistent.
    pub indicator_runs: Vec<BTreeSet<IndicatorKind>>,
    pub indicators: BTreeSet<IndicatorKind>,
    /// Keyed variables, `miscellaneous` included.
    pub variables: BTreeSet<VariableRef>,
    pub links: Vec<KeyedLink>,
    pub evidence: Vec<String>,
    pub keywords: Vec<String>,
}

/// What one version should produce for one snippet.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedSnippet {
    pub indicators: BTreeSet<IndicatorKind>,
    /// Variable labels per indicator run set.
    pub variables: BTreeMap<IndicatorKind, BTreeSet<String>>,
    /// Identified variables, `miscellaneous` excluded.
    pub identified: BTreeSet<VariableRef>,
    pub links: BTreeSet<(VariableRef, VariableRef)>,
    /// Link prompts: C(m, 2) for m identified variables.
    pub pair_prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub questions: Vec<String>,
    pub snippets: Vec<KeyedSnippet>,
}

impl AnswerKey {
    pub fn snippet(&self, id: &str) -> Option<&KeyedSnippet> {
        self.snippets.iter().find(|s| s.snippet_id == id)
    }

    /// Expected labels of `snippet` under a variable-step taxonomy. Keyed
    /// variables the taxonomy lacks fall back to `miscellaneous`.
    pub fn expected_variables(&self, taxonomy: &TaxonomyVersion, snippet: &str) -> ExpectedSnippet {
        let Some(s) = self.snippet(snippet) else {
            return ExpectedSnippet::default();
        };
        let mut out = ExpectedSnippet {
            indicators: s.indicators.clone(),
            ..Default::default()
        };
        for &kind in &s.indicators {
            let mut labels: BTreeSet<String> = s
                .variables
                .iter()
                .filter(|v| v.indicator == kind)
                .map(|v| {
                    if taxonomy.has_variable(v) {
                        v.name.clone()
                    } else {
                        MISCELLANEOUS.to_owned()
                    }
                })
                .collect();
            if labels.is_empty() {
                labels.insert(MISCELLANEOUS.to_owned());
            }
            for l in &labels {
                let r = VariableRef::new(kind, l.clone());
                if !r.is_miscellaneous() {
                    out.identified.insert(r);
                }
            }
            out.variables.insert(kind, labels);
        }
        let m = out.identified.len();
        out.pair_prompts = m * m.saturating_sub(1) / 2;
        out.links = s
            .links
            .iter()
            .filter(|l| out.identified.contains(&l.source) && out.identified.contains(&l.target))
            .map(|l| (l.source.clone(), l.target.clone()))
            .collect();
        out
    }

    /// Checks the key against itself: scripted runs cover the keyed
    /// indicators, variables belong to keyed indicators, and links join two
    /// distinct keyed, non-miscellaneous variables.
    pub fn check_consistency(&self) -> Result<(), String> {
        let known: BTreeSet<VariableRef> = BASE_VARIABLES
            .iter()
            .chain(std::iter::once(&FORK_VARIABLE))
            .map(|v| VariableRef::new(v.0, v.1))
            .collect();
        for s in &self.snippets {
            let id = &s.snippet_id;
            let union: BTreeSet<IndicatorKind> = s.indicator_runs.iter().flatten().copied().collect();
            if union != s.indicators {
                return Err(format!("{id}: runs cover {union:?}, key says {:?}", s.indicators));
            }
            let from_vars: BTreeSet<IndicatorKind> = s.variables.iter().map(|v| v.indicator).collect();
            if from_vars != s.indicators {
                return Err(format!(
                    "{id}: variables cover {from_vars:?}, key says {:?}",
                    s.indicators
                ));
            }
            for v in &s.variables {
                if !v.is_miscellaneous() && !known.contains(v) {
                    return Err(format!("{id}: {v} is not a fixture variable"));
                }
            }
            for l in &s.links {
                let keyed = |v: &VariableRef| !v.is_miscellaneous() && s.variables.contains(v);
                if l.source == l.target || !keyed(&l.source) || !keyed(&l.target) {
                    return Err(format!(
                        "{id}: link {} -> {} is not between keyed variables",
                        l.source, l.target
                    ));
                }
            }
            let pairs: BTreeSet<(VariableRef, VariableRef)> = s
                .links
                .iter()
                .map(|l| {
                    if l.source < l.target {
                        (l.source.clone(), l.target.clone())
                    } else {
                        (l.target.clone(), l.source.clone())
                    }
                })
                .collect();
            if pairs.len() != s.links.len() {
                return Err(format!("{id}: two links share a variable pair"));
            }
        }
        Ok(())
    }
}

fn letters(s: &str) -> BTreeSet<IndicatorKind> {
    s.chars()
        .map(|c| match c {
            'D' => D,
            'P' => P,
            'S' => S,
            'I' => I,
            'R' => R,
            other => panic!("unknown indicator letter {other}"),
        })
        .collect()
}

fn resolve(plan: &SnippetPlan, name: &str) -> VariableRef {
    let (kind, _) = plan
        .variables
        .iter()
        .find(|(_, n)| *n == name)
        .unwrap_or_else(|| panic!("{}: link names unknown variable {name}", plan.id));
    VariableRef::new(*kind, name)
}

pub fn answer_key() -> AnswerKey {
    let snippets = SNIPPETS
        .iter()
        .map(|s| {
            let (doc_id, ord) = s.id.split_once('#').expect("snippet ids are doc#n");
            let ord: usize = ord.parse().expect("ordinal");
            let doc = DOCS
                .iter()
                .find(|d| d.id == doc_id)
                .expect("snippet of a known document");
            let start = doc.starts[ord];
            let end = doc.starts.get(ord + 1).map_or(doc.lines.len() - 1, |n| n - 1);
            let indicators: BTreeSet<IndicatorKind> = s.variables.iter().map(|v| v.0).collect();
            KeyedSnippet {
                snippet_id: s.id.to_owned(),
                document_id: doc_id.to_owned(),
                conversation_range: [start, end],
                theme: s.theme,
                indicator_runs: match s.runs {
                    Some(runs) => runs.iter().map(|r| letters(r)).collect(),
                    None => vec![indicators.clone()],
                },
                indicators,
                variables: s.variables.iter().map(|(k, n)| VariableRef::new(*k, *n)).collect(),
                links: s
                    .links
                    .iter()
                    .map(|(a, b, rel)| KeyedLink {
                        source: resolve(s, a),
                        target: resolve(s, b),
                        relationship: (*rel).to_owned(),
                    })
                    .collect(),
                evidence: s.evidence.iter().map(|e| (*e).to_owned()).collect(),
                keywords: s.keywords.iter().map(|k| (*k).to_owned()).collect(),
            }
        })
        .collect();
    AnswerKey {
        questions: questions(),
        snippets,
    }
}

/// Transcript files as `(document id, tab-separated content)`.
pub fn transcripts() -> BTreeMap<String, String> {
    DOCS.iter()
        .map(|d| {
            let body: String = d
                .lines
                .iter()
                .map(|(resident, text)| format!("{}\t{}\n", if *resident { d.resident } else { INTERVIEWER }, text))
                .collect();
            (d.id.to_owned(), body)
        })
        .collect()
}

fn fenced(value: serde_json::Value) -> String {
    format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(&value).expect("json value")
    )
}

fn label_reply(labels: &[String], evidence: &[String], explanation: &str) -> String {
    fenced(serde_json::json!({
        "labels": labels,
        "evidence": evidence,
        "explanation": explanation,
    }))
}

/// The corpus, its key and the keyed replies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureCorpus {
    pub transcripts: BTreeMap<String, String>,
    pub key: AnswerKey,
    pub fixtures: FixtureSet,
}

pub fn fixture_engine_config() -> EngineConfig {
    EngineConfig {
        k: FIXTURE_K,
        clock: ClockKind::Logical,
        ..EngineConfig::default()
    }
}

/// Edits that add the base variables to a variable version.
pub fn base_variable_edits() -> Vec<Edit> {
    BASE_VARIABLES.iter().map(add_variable).collect()
}

/// Edit that the forked variable version adds.
pub fn fork_variable_edits() -> Vec<Edit> {
    vec![add_variable(&FORK_VARIABLE)]
}

/// Creates the five fixture versions: indicators, variables on top of them,
/// links on top of those, a variable fork that adds `garbage`, and links on
/// the fork.
pub fn create_fixture_versions(wb: &mut Workbench) -> Result<(), EngineError> {
    let v1 = wb.create_version(Step::IndicatorId, None, &[])?;
    let mut edits = vec![Edit::SetUpstream {
        version_id: v1.id.clone(),
    }];
    edits.extend(base_variable_edits());
    let v2 = wb.create_version(Step::VariableId, None, &edits)?;
    let v3 = wb.create_version(
        Step::LinkId,
        None,
        &[Edit::SetUpstream {
            version_id: v2.id.clone(),
        }],
    )?;
    let v4 = wb.create_version(Step::VariableId, Some(&v2.id), &fork_variable_edits())?;
    let v5 = wb.create_version(
        Step::LinkId,
        None,
        &[Edit::SetUpstream {
            version_id: v4.id.clone(),
        }],
    )?;
    let ids = [&v1.id, &v2.id, &v3.id, &v4.id, &v5.id];
    let expected = [V_INDICATORS, V_VARIABLES, V_LINKS, V_VARIABLES_FORK, V_LINKS_FORK];
    assert!(
        ids.iter().zip(expected).all(|(a, b)| a.as_str() == b),
        "fixture versions must be created in a fresh workspace"
    );
    Ok(())
}

/// Layouts stored in a fixture workspace.
pub fn fixture_layouts() -> Vec<LayoutRequest> {
    let mut out: Vec<LayoutRequest> = [V_INDICATORS, V_VARIABLES, V_LINKS, V_VARIABLES_FORK, V_LINKS_FORK]
        .into_iter()
        .map(|v| LayoutRequest::new(LayoutKind::Uncertainty, v))
        .collect();
    out.push(LayoutRequest::new(LayoutKind::Keywords, V_VARIABLES));
    out.push(LayoutRequest::new(LayoutKind::Keywords, V_VARIABLES_FORK));
    out.push(LayoutRequest::new(LayoutKind::Dpsir, V_LINKS));
    let mut hidden = LayoutRequest::new(LayoutKind::Dpsir, V_LINKS);
    hidden.hide = BTreeSet::from([S, I]);
    out.push(hidden);
    let mut opened = LayoutRequest::new(LayoutKind::Dpsir, V_LINKS_FORK);
    opened.open = BTreeSet::from([D, P]);
    out.push(opened);
    let mut graph = LayoutRequest::new(LayoutKind::LinkGraph, V_LINKS);
    graph.snippet_id = Some(FOUR_VARIABLE_SNIPPET.to_owned());
    out.push(graph);
    out
}

impl FixtureCorpus {
    pub fn documents(&self) -> Vec<Document> {
        self.transcripts
            .iter()
            .map(|(id, body)| parse_transcript(id, body, None).expect("fixture transcripts are well formed"))
            .collect()
    }

    pub fn provider(&self) -> FixtureProvider {
        FixtureProvider::new(self.fixtures.clone()).with_embedding_dim(FIXTURE_EMBEDDING_DIM)
    }

    /// Builds the corpus and its replies. `seed` only salts the fallback
    /// replies for prompts outside the key.
    pub async fn generate(seed: u64) -> Self {
        let key = answer_key();
        let transcripts = transcripts();
        let provider = Arc::new(FixtureProvider::new(FixtureSet::new(seed)).with_embedding_dim(FIXTURE_EMBEDDING_DIM));
        let dir = tempfile::tempdir().expect("temporary workspace");
        let store = Workspace::open(dir.path()).expect("temporary workspace");
        let mut wb = Workbench::open(store, provider.clone(), fixture_engine_config()).expect("fresh workbench");
        let corpus = Self {
            transcripts,
            key,
            fixtures: FixtureSet::new(seed),
        };
        corpus.drive(&mut wb, &provider).await.expect("fixture generation");
        Self {
            fixtures: provider.fixtures(),
            ..corpus
        }
    }

    async fn drive(&self, wb: &mut Workbench, provider: &FixtureProvider) -> Result<(), EngineError> {
        let questions = self.key.questions.clone();
        for doc in self.documents() {
            self.key_segmentation(&doc, &questions, provider);
            wb.add_document(&doc)?;
        }
        wb.segment(&questions).await?;
        create_fixture_versions(wb)?;
        let texts: BTreeMap<String, String> = wb.snippet_texts()?.into_iter().map(|s| (s.id, s.text)).collect();

        let v1 = wb.version(V_INDICATORS)?.clone();
        for (sid, text) in &texts {
            let s = self.key.snippet(sid).expect("every snippet is keyed");
            let evidence = &s.evidence;
            let explanation = s.theme.explanation();
            let variants: Vec<String> = s
                .indicator_runs
                .iter()
                .map(|run| {
                    let labels: Vec<String> = run.iter().map(|k| k.name().to_owned()).collect();
                    label_reply(&labels, evidence, explanation)
                })
                .collect();
            provider.insert(
                &prompts::indicator_prompt(&v1, text).map_err(PipelineError::from)?,
                Step::IndicatorId,
                variants,
            );
        }
        wb.execute(V_INDICATORS, None).await?;

        for (var_version, link_version) in [(V_VARIABLES, V_LINKS), (V_VARIABLES_FORK, V_LINKS_FORK)] {
            let taxonomy = wb.version(var_version)?.clone();
            let upstream = wb.results(V_INDICATORS)?.result;
            for (sid, text) in &texts {
                let s = self.key.snippet(sid).expect("keyed");
                let Some(up) = upstream.runsets_for(sid).next() else {
                    continue;
                };
                let expected = self.key.expected_variables(&taxonomy, sid);
                for kind in IndicatorKind::ALL {
                    if !up.aggregate.labels.contains(kind.name()) {
                        continue;
                    }
                    let labels: Vec<String> = expected
                        .variables
                        .get(&kind)
                        .map(|l| l.iter().cloned().collect())
                        .unwrap_or_else(|| vec![MISCELLANEOUS.to_owned()]);
                    let prompt = prompts::variable_prompt(&taxonomy, kind, text, &up.aggregate.explanation)
                        .map_err(PipelineError::from)?;
                    provider.insert(
                        &prompt,
                        Step::VariableId,
                        vec![label_reply(&labels, &s.evidence, s.theme.explanation())],
                    );
                }
            }
            wb.execute(var_version, None).await?;

            let links = wb.version(link_version)?.clone();
            let identified = wb.results(var_version)?.result;
            for (sid, text) in &texts {
                let s = self.key.snippet(sid).expect("keyed");
                let vars = identified.identified_variables(sid);
                for (i, a) in vars.iter().enumerate() {
                    for b in &vars[i + 1..] {
                        let va = variable_of(&links, a);
                        let vb = variable_of(&links, b);
                        let names = prompts::pair_names(&va, &vb);
                        let keyed = s
                            .links
                            .iter()
                            .find(|l| (&l.source == a && &l.target == b) || (&l.source == b && &l.target == a));
                        let reply = match keyed {
                            None => "None".to_owned(),
                            Some(l) => {
                                let name = |v: &VariableRef| if v == a { names[0].clone() } else { names[1].clone() };
                                fenced(serde_json::json!({
                                    "source": name(&l.source),
                                    "target": name(&l.target),
                                    "relationship": l.relationship,
                                    "evidence": s.evidence,
                                    "explanation": s.theme.explanation(),
                                }))
                            }
                        };
                        provider.insert(
                            &prompts::link_prompt(&links, &va, &vb, text).map_err(PipelineError::from)?,
                            Step::LinkId,
                            vec![reply],
                        );
                    }
                }
            }
            wb.execute(link_version, None).await?;

            for (sid, evidence) in misc_evidence(&wb.results(var_version)?.result) {
                let s = self.key.snippet(&sid).expect("keyed");
                let reply = fenced(serde_json::json!({ "keywords": s.keywords }));
                provider.insert(&prompts::keyword_prompt(&evidence), Step::KeywordExtract, vec![reply]);
            }
        }

        let cfg = wb.config().clone();
        for v in [V_INDICATORS, V_VARIABLES, V_LINKS, V_VARIABLES_FORK, V_LINKS_FORK] {
            let result = wb.results(v)?.result;
            let clusters =
                cluster_result(&result, &texts, wb.gateway(), None, cfg.cluster_threshold, cfg.parallel).await;
            for ids in clusters.assignment.clusters.values() {
                let sample = topic_sample(ids, &texts);
                if sample.is_empty() {
                    continue;
                }
                let mut votes: BTreeMap<Theme, usize> = BTreeMap::new();
                for id in ids {
                    *votes.entry(self.key.snippet(id).expect("keyed").theme).or_default() += 1;
                }
                let best = votes
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .expect("non-empty")
                    .0;
                let reply = fenced(serde_json::json!({ "topic": best.topic() }));
                provider.insert(&prompts::topic_prompt(&sample), Step::TopicLabel, vec![reply]);
            }
        }
        Ok(())
    }

    fn key_segmentation(&self, doc: &Document, questions: &[String], provider: &FixtureProvider) {
        let plan = DOCS.iter().find(|d| d.id == doc.id).expect("known document");
        let base = prompts::segmentation_prompt(doc, questions);
        let valid = fenced(serde_json::json!({ "boundaries": plan.starts, "topics": plan.topics }));
        if doc.id == REPAIRED_DOCUMENT {
            // out of order on purpose; the repaired prompt gets the valid reply
            let mut bad: Vec<i64> = plan.starts.iter().map(|&s| s as i64).collect();
            bad.push(1);
            let invalid = fenced(serde_json::json!({ "boundaries": bad, "topics": plan.topics }));
            let violations = validate_segmentation(doc, &bad).expect_err("scripted to fail validation");
            provider.insert(&base, Step::Segmentation, vec![invalid.clone()]);
            let repair: Prompt = base.with_repair(&invalid, &prompts::segmentation_repair(&violations));
            provider.insert(&repair, Step::Segmentation, vec![valid]);
        } else {
            provider.insert(&base, Step::Segmentation, vec![valid]);
        }
    }

    /// Writes `transcripts/<doc>.tsv`, `answer_key.json` and `responses/`.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        let t = dir.join("transcripts");
        fs::create_dir_all(&t)?;
        for (id, body) in &self.transcripts {
            fs::write(t.join(format!("{id}.tsv")), body)?;
        }
        let key = serde_json::to_string_pretty(&self.key).map_err(io::Error::other)?;
        fs::write(dir.join("answer_key.json"), key + "\n")?;
        let r = dir.join("responses");
        if r.exists() {
            fs::remove_dir_all(&r)?;
        }
        self.fixtures.write_dir(&r)
    }

    pub fn read_dir(dir: &Path) -> io::Result<Self> {
        let mut transcripts = BTreeMap::new();
        for entry in fs::read_dir(dir.join("transcripts"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("tsv") {
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
                transcripts.insert(id, fs::read_to_string(&path)?);
            }
        }
        let key = serde_json::from_str(&fs::read_to_string(dir.join("answer_key.json"))?).map_err(io::Error::other)?;
        Ok(Self {
            transcripts,
            key,
            fixtures: FixtureSet::read_dir(&dir.join("responses"))?,
        })
    }
}

fn variable_of(version: &TaxonomyVersion, r: &VariableRef) -> Variable {
    version
        .find_variable(r.indicator, &r.name)
        .cloned()
        .expect("identified variables come from the version")
}

/// Runs the full fixture pipeline into `root`: ingest, segmentation, the
/// five versions, and every fixture layout.
pub async fn run_fixture_pipeline(corpus: &FixtureCorpus, root: &Path) -> Result<Workbench, EngineError> {
    let store = Workspace::open(root)?;
    let mut wb = Workbench::open(store, Arc::new(corpus.provider()), fixture_engine_config())?;
    for doc in corpus.documents() {
        wb.add_document(&doc)?;
    }
    wb.segment(&corpus.key.questions).await?;
    create_fixture_versions(&mut wb)?;
    for v in [V_INDICATORS, V_VARIABLES, V_LINKS, V_VARIABLES_FORK, V_LINKS_FORK] {
        wb.execute(v, None).await?;
    }
    for req in fixture_layouts() {
        let doc = wb.layout(&req).await?;
        wb.save_layout(&doc)?;
    }
    wb.persist_caches()?;
    Ok(wb)
}

/// A complete, deterministic fixture workspace at `root`.
pub async fn generate_fixture_workspace(seed: u64, root: &Path) -> Result<Workbench, EngineError> {
    let corpus = FixtureCorpus::generate(seed).await;
    run_fixture_pipeline(&corpus, root).await
}

/// Location of the shipped fixture copy.
pub fn shipped_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("island")
}
