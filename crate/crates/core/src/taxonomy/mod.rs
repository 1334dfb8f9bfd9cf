//! The evolving DPSIR taxonomy: indicator definitions, variable lists, prompt
//! templates and version lineage.
//!
//! Versions are immutable snapshots. Editing a version always forks a new one
//! whose `parent_id` points back; the only field written after creation is
//! `result_id`, set when the version is executed.

mod rules;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};

pub use rules::{Rule, RuleBook, RuleCondition, RuleValue};
pub use template::{placeholders, Placeholder, PromptTemplate};

/// Name of the reserved catch-all variable each indicator carries.
pub const MISCELLANEOUS: &str = "miscellaneous";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IndicatorKind {
    Driver,
    Pressure,
    State,
    Impact,
    Response,
}

impl IndicatorKind {
    /// The five kinds in their cyclic framework order.
    pub const ALL: [IndicatorKind; 5] = [
        IndicatorKind::Driver,
        IndicatorKind::Pressure,
        IndicatorKind::State,
        IndicatorKind::Impact,
        IndicatorKind::Response,
    ];

    pub fn letter(self) -> char {
        match self {
            IndicatorKind::Driver => 'D',
            IndicatorKind::Pressure => 'P',
            IndicatorKind::State => 'S',
            IndicatorKind::Impact => 'I',
            IndicatorKind::Response => 'R',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IndicatorKind::Driver => "Driver",
            IndicatorKind::Pressure => "Pressure",
            IndicatorKind::State => "State",
            IndicatorKind::Impact => "Impact",
            IndicatorKind::Response => "Response",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Display color shared by every view and the SVG export.
    pub fn color(self) -> &'static str {
        match self {
            IndicatorKind::Driver => "#4e79a7",
            IndicatorKind::Pressure => "#e15759",
            IndicatorKind::State => "#59a14f",
            IndicatorKind::Impact => "#f28e2b",
            IndicatorKind::Response => "#b07aa1",
        }
    }

    /// Parses a letter, singular or plural name, case-insensitively.
    pub fn from_label(label: &str) -> Option<Self> {
        let l = label.trim().to_ascii_lowercase();
        if l.len() == 1 {
            return Self::ALL
                .into_iter()
                .find(|k| l.starts_with(k.letter().to_ascii_lowercase()));
        }
        let singular = l.strip_suffix('s').unwrap_or(&l);
        Self::ALL
            .into_iter()
            .find(|k| singular == k.name().to_ascii_lowercase())
    }
}

impl fmt::Display for IndicatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndicatorKind {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_label(s).ok_or_else(|| TaxonomyError::UnknownIndicator(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub kind: IndicatorKind,
    pub definition: String,
    pub color: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableType {
    Societal,
    Environmental,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub indicator_kind: IndicatorKind,
    pub definition: String,
    pub variable_type: VariableType,
    pub reserved: bool,
}

impl Variable {
    pub fn miscellaneous(kind: IndicatorKind) -> Self {
        Self {
            name: MISCELLANEOUS.to_owned(),
            indicator_kind: kind,
            definition: format!(
                "Anything that fits the {} concept but none of the other tags.",
                kind.name().to_ascii_lowercase()
            ),
            variable_type: VariableType::Societal,
            reserved: true,
        }
    }

    pub fn reference(&self) -> VariableRef {
        VariableRef::new(self.indicator_kind, &self.name)
    }
}

/// A variable name qualified by its indicator. Names are only unique within
/// an indicator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableRef {
    pub indicator: IndicatorKind,
    pub name: String,
}

impl VariableRef {
    pub fn new(indicator: IndicatorKind, name: impl Into<String>) -> Self {
        Self {
            indicator,
            name: name.into(),
        }
    }

    /// `Indicator/name`, used as a stable string identity.
    pub fn key(&self) -> String {
        format!("{}/{}", self.indicator.name(), self.name)
    }

    pub fn parse_key(key: &str) -> Option<Self> {
        let (ind, name) = key.split_once('/')?;
        Some(Self::new(IndicatorKind::from_label(ind)?, name))
    }

    pub fn is_miscellaneous(&self) -> bool {
        self.name.eq_ignore_ascii_case(MISCELLANEOUS)
    }
}

impl fmt::Display for VariableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Pipeline step a template or version belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Step {
    IndicatorId,
    VariableId,
    LinkId,
    Segmentation,
    TopicLabel,
    KeywordExtract,
}

impl Step {
    pub const ALL: [Step; 6] = [
        Step::IndicatorId,
        Step::VariableId,
        Step::LinkId,
        Step::Segmentation,
        Step::TopicLabel,
        Step::KeywordExtract,
    ];

    pub fn allowed_bindings(self) -> &'static [&'static str] {
        match self {
            Step::IndicatorId => &["concept_definitions", "snippet"],
            Step::VariableId => &["indicator", "tag_list", "snippet", "explanation"],
            Step::LinkId => &["var_pair_definitions", "snippet"],
            Step::Segmentation => &["questions", "conversations"],
            Step::TopicLabel => &["snippets"],
            Step::KeywordExtract => &["evidence"],
        }
    }

    /// The step whose version a version of this step consumes.
    pub fn upstream(self) -> Option<Step> {
        match self {
            Step::VariableId => Some(Step::IndicatorId),
            Step::LinkId => Some(Step::VariableId),
            _ => None,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Step::IndicatorId => "indicators",
            Step::VariableId => "variables",
            Step::LinkId => "links",
            Step::Segmentation => "segmentation",
            Step::TopicLabel => "topics",
            Step::KeywordExtract => "keywords",
        }
    }

    pub fn from_slug(s: &str) -> Option<Step> {
        Self::ALL.into_iter().find(|st| st.slug() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("unknown indicator {0:?}")]
    UnknownIndicator(String),
    #[error("version {0} not found")]
    VersionNotFound(String),
    #[error("variable {name:?} already exists under {indicator}")]
    DuplicateVariable { indicator: IndicatorKind, name: String },
    #[error("variable {name:?} not found under {indicator}")]
    VariableNotFound { indicator: IndicatorKind, name: String },
    #[error("the reserved miscellaneous variable of {0} cannot be removed or renamed")]
    ReservedVariable(IndicatorKind),
    #[error("definition of {0} must not be empty")]
    EmptyDefinition(IndicatorKind),
    #[error("template has unknown placeholders: {0:?}")]
    InvalidTemplate(Vec<String>),
    #[error("template is for step {found:?}, version is {expected:?}")]
    TemplateStepMismatch { expected: Step, found: Step },
    #[error("parent {parent} is a {parent_step:?} version, cannot fork a {step:?} version from it")]
    StepMismatch {
        parent: String,
        parent_step: Step,
        step: Step,
    },
    #[error("{0:?} versions require an upstream version")]
    MissingUpstream(Step),
    #[error("upstream {id} is a {found:?} version, expected {expected:?}")]
    WrongUpstream { id: String, expected: Step, found: Step },
    #[error("rule conflicts with {0}: the same value cannot be both required and forbidden")]
    ConflictingRule(String),
    #[error("rule {0} not found")]
    RuleNotFound(String),
}

/// One edit applied while forking a version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    SetIndicatorDefinition {
        indicator: IndicatorKind,
        definition: String,
    },
    AppendIndicatorDefinition {
        indicator: IndicatorKind,
        text: String,
    },
    AddVariable {
        indicator: IndicatorKind,
        name: String,
        definition: String,
        variable_type: VariableType,
    },
    RemoveVariable {
        indicator: IndicatorKind,
        name: String,
    },
    SetVariableDefinition {
        indicator: IndicatorKind,
        name: String,
        definition: String,
    },
    SetVariableType {
        indicator: IndicatorKind,
        name: String,
        variable_type: VariableType,
    },
    SetTemplate {
        template: PromptTemplate,
    },
    SetUpstream {
        version_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyVersion {
    pub id: String,
    pub step: Step,
    pub parent_id: Option<String>,
    pub upstream_version_id: Option<String>,
    pub indicators: Vec<Indicator>,
    pub variables: Vec<Variable>,
    pub template: PromptTemplate,
    pub created_at: DateTime<Utc>,
    pub result_id: Option<String>,
}

impl TaxonomyVersion {
    pub fn indicator(&self, kind: IndicatorKind) -> &Indicator {
        self.indicators
            .iter()
            .find(|i| i.kind == kind)
            .expect("every version carries all five indicators")
    }

    pub fn variables_of(&self, kind: IndicatorKind) -> impl Iterator<Item = &Variable> {
        self.variables.iter().filter(move |v| v.indicator_kind == kind)
    }

    pub fn find_variable(&self, kind: IndicatorKind, name: &str) -> Option<&Variable> {
        self.variables_of(kind).find(|v| v.name.eq_ignore_ascii_case(name))
    }

    pub fn has_variable(&self, r: &VariableRef) -> bool {
        self.find_variable(r.indicator, &r.name).is_some()
    }
}

/// Indicator definitions used when a taxonomy is started from scratch.
pub fn default_indicators() -> Vec<Indicator> {
    IndicatorKind::ALL
        .into_iter()
        .map(|kind| {
            let definition = match kind {
                IndicatorKind::Driver => "A societal demand or need, such as livelihood, population growth or tourism, that motivates human activity.",
                IndicatorKind::Pressure => "A human activity that stresses the environment, such as resource extraction, emissions or physical disturbance.",
                IndicatorKind::State => "The condition of the natural environment and how it changes, such as habitat quality or species abundance.",
                IndicatorKind::Impact => "An effect of environmental change on people or ecosystems, such as lost income or health problems.",
                IndicatorKind::Response => "Any behavior, action, or effort to protect the environment, address environmental issues, or be environmentally friendly.",
            };
            Indicator {
                kind,
                definition: definition.to_owned(),
                color: kind.color().to_owned(),
            }
        })
        .collect()
}

fn default_variables() -> Vec<Variable> {
    IndicatorKind::ALL.into_iter().map(Variable::miscellaneous).collect()
}

/// Single-writer store of taxonomy versions.
pub struct VersionStore {
    versions: BTreeMap<String, TaxonomyVersion>,
    next_id: u64,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for VersionStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VersionStore")
            .field("versions", &self.versions.len())
            .field("next_id", &self.next_id)
            .finish()
    }
}

impl Default for VersionStore {
    fn default() -> Self {
        Self::new(Arc::new(SystemClock))
    }
}

impl VersionStore {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            versions: BTreeMap::new(),
            next_id: 1,
            clock,
        }
    }

    /// Restores a store from persisted versions.
    pub fn from_versions(clock: Arc<dyn Clock>, versions: Vec<TaxonomyVersion>) -> Self {
        let next_id = versions
            .iter()
            .filter_map(|v| v.id.strip_prefix('v')?.parse::<u64>().ok())
            .max()
            .map_or(1, |m| m + 1);
        Self {
            versions: versions.into_iter().map(|v| (v.id.clone(), v)).collect(),
            next_id,
            clock,
        }
    }

    pub fn get(&self, id: &str) -> Result<&TaxonomyVersion, TaxonomyError> {
        self.versions
            .get(id)
            .ok_or_else(|| TaxonomyError::VersionNotFound(id.to_owned()))
    }

    pub fn list(&self, step: Option<Step>) -> Vec<&TaxonomyVersion> {
        self.versions
            .values()
            .filter(|v| step.is_none_or(|s| v.step == s))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaxonomyVersion> {
        self.versions.values()
    }

    /// Forks a new version. Without a parent the new version starts from the
    /// upstream version's taxonomy (if any) or from the defaults.
    pub fn create_version(
        &mut self,
        step: Step,
        parent: Option<&str>,
        edits: &[Edit],
    ) -> Result<TaxonomyVersion, TaxonomyError> {
        let mut upstream = None;
        let mut base = match parent {
            Some(pid) => {
                let p = self.get(pid)?;
                if p.step != step {
                    return Err(TaxonomyError::StepMismatch {
                        parent: pid.to_owned(),
                        parent_step: p.step,
                        step,
                    });
                }
                upstream = p.upstream_version_id.clone();
                (p.indicators.clone(), p.variables.clone(), p.template.clone())
            }
            None => (
                default_indicators(),
                default_variables(),
                PromptTemplate::default_for(step),
            ),
        };
        for e in edits {
            if let Edit::SetUpstream { version_id } = e {
                upstream = Some(version_id.clone());
            }
        }
        if let Some(expected) = step.upstream() {
            let id = upstream.as_deref().ok_or(TaxonomyError::MissingUpstream(step))?;
            let up = self.get(id)?;
            if up.step != expected {
                return Err(TaxonomyError::WrongUpstream {
                    id: id.to_owned(),
                    expected,
                    found: up.step,
                });
            }
            if parent.is_none() {
                base.0 = up.indicators.clone();
                base.1 = up.variables.clone();
            }
        }
        let (mut indicators, mut variables, mut template) = base;
        for e in edits {
            apply_edit(e, step, &mut indicators, &mut variables, &mut template)?;
        }
        let version = TaxonomyVersion {
            id: format!("v{}", self.next_id),
            step,
            parent_id: parent.map(str::to_owned),
            upstream_version_id: if step.upstream().is_some() { upstream } else { None },
            indicators,
            variables,
            template,
            created_at: self.clock.now(),
            result_id: None,
        };
        self.next_id += 1;
        self.versions.insert(version.id.clone(), version.clone());
        Ok(version)
    }

    /// Records the execution result of a version.
    pub fn attach_result(&mut self, version_id: &str, result_id: &str) -> Result<(), TaxonomyError> {
        let v = self
            .versions
            .get_mut(version_id)
            .ok_or_else(|| TaxonomyError::VersionNotFound(version_id.to_owned()))?;
        v.result_id = Some(result_id.to_owned());
        Ok(())
    }

    /// Parent chain from `id` back to the root, `id` first.
    pub fn lineage(&self, id: &str) -> Result<Vec<String>, TaxonomyError> {
        let mut out = vec![];
        let mut cur = Some(id.to_owned());
        while let Some(c) = cur {
            let v = self.get(&c)?;
            out.push(c);
            cur = v.parent_id.clone();
            if out.len() > self.versions.len() {
                unreachable!("parent links always point to older versions");
            }
        }
        Ok(out)
    }
}

fn apply_edit(
    edit: &Edit,
    step: Step,
    indicators: &mut [Indicator],
    variables: &mut Vec<Variable>,
    template: &mut PromptTemplate,
) -> Result<(), TaxonomyError> {
    let find = |variables: &[Variable], kind: IndicatorKind, name: &str| {
        variables
            .iter()
            .position(|v| v.indicator_kind == kind && v.name.eq_ignore_ascii_case(name))
    };
    match edit {
        Edit::SetIndicatorDefinition { indicator, definition } => {
            if definition.trim().is_empty() {
                return Err(TaxonomyError::EmptyDefinition(*indicator));
            }
            indicator_mut(indicators, *indicator).definition = definition.clone();
        }
        Edit::AppendIndicatorDefinition { indicator, text } => {
            let ind = indicator_mut(indicators, *indicator);
            let sep = if ind.definition.ends_with(' ') || ind.definition.is_empty() {
                ""
            } else {
                " "
            };
            ind.definition = format!("{}{sep}{}", ind.definition, text);
        }
        Edit::AddVariable {
            indicator,
            name,
            definition,
            variable_type,
        } => {
            let name = name.trim();
            if find(variables, *indicator, name).is_some() {
                return Err(TaxonomyError::DuplicateVariable {
                    indicator: *indicator,
                    name: name.to_owned(),
                });
            }
            // new variables go before the reserved slot so it stays last
            let at = variables
                .iter()
                .position(|v| v.indicator_kind == *indicator && v.reserved)
                .unwrap_or(variables.len());
            variables.insert(
                at,
                Variable {
                    name: name.to_owned(),
                    indicator_kind: *indicator,
                    definition: definition.clone(),
                    variable_type: *variable_type,
                    reserved: false,
                },
            );
        }
        Edit::RemoveVariable { indicator, name } => {
            let i = find(variables, *indicator, name).ok_or_else(|| TaxonomyError::VariableNotFound {
                indicator: *indicator,
                name: name.clone(),
            })?;
            if variables[i].reserved {
                return Err(TaxonomyError::ReservedVariable(*indicator));
            }
            variables.remove(i);
        }
        Edit::SetVariableDefinition {
            indicator,
            name,
            definition,
        } => {
            let i = find(variables, *indicator, name).ok_or_else(|| TaxonomyError::VariableNotFound {
                indicator: *indicator,
                name: name.clone(),
            })?;
            variables[i].definition = definition.clone();
        }
        Edit::SetVariableType {
            indicator,
            name,
            variable_type,
        } => {
            let i = find(variables, *indicator, name).ok_or_else(|| TaxonomyError::VariableNotFound {
                indicator: *indicator,
                name: name.clone(),
            })?;
            variables[i].variable_type = *variable_type;
        }
        Edit::SetTemplate { template: t } => {
            if t.step != step {
                return Err(TaxonomyError::TemplateStepMismatch {
                    expected: step,
                    found: t.step,
                });
            }
            t.validate().map_err(TaxonomyError::InvalidTemplate)?;
            *template = t.clone();
        }
        Edit::SetUpstream { .. } => {}
    }
    Ok(())
}

fn indicator_mut(indicators: &mut [Indicator], kind: IndicatorKind) -> &mut Indicator {
    indicators
        .iter_mut()
        .find(|i| i.kind == kind)
        .expect("every version carries all five indicators")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;

    fn store() -> VersionStore {
        VersionStore::new(Arc::new(LogicalClock::default()))
    }

    fn add(kind: IndicatorKind, name: &str) -> Edit {
        Edit::AddVariable {
            indicator: kind,
            name: name.into(),
            definition: format!("{name} definition"),
            variable_type: VariableType::Societal,
        }
    }

    fn names(v: &TaxonomyVersion, kind: IndicatorKind) -> Vec<String> {
        v.variables_of(kind).map(|v| v.name.clone()).collect()
    }

    #[test]
    fn indicator_labels_parse() {
        assert_eq!(IndicatorKind::from_label("D"), Some(IndicatorKind::Driver));
        assert_eq!(IndicatorKind::from_label("s"), Some(IndicatorKind::State));
        assert_eq!(IndicatorKind::from_label("States"), Some(IndicatorKind::State));
        assert_eq!(IndicatorKind::from_label("drivers"), Some(IndicatorKind::Driver));
        assert_eq!(IndicatorKind::from_label("Impact"), Some(IndicatorKind::Impact));
        assert_eq!(IndicatorKind::from_label("X"), None);
        let colors: std::collections::BTreeSet<_> = IndicatorKind::ALL.iter().map(|k| k.color()).collect();
        assert_eq!(colors.len(), 5);
    }

    #[test]
    fn adding_a_variable_forks() {
        let mut s = store();
        let root = s.create_version(Step::IndicatorId, None, &[]).unwrap();
        let p = s
            .create_version(
                Step::VariableId,
                None,
                &[
                    Edit::SetUpstream {
                        version_id: root.id.clone(),
                    },
                    add(IndicatorKind::Driver, "population"),
                ],
            )
            .unwrap();
        let c = s
            .create_version(Step::VariableId, Some(&p.id), &[add(IndicatorKind::Driver, "garbage")])
            .unwrap();
        assert_eq!(
            names(&c, IndicatorKind::Driver),
            vec!["population", "garbage", "miscellaneous"]
        );
        assert_eq!(
            names(s.get(&p.id).unwrap(), IndicatorKind::Driver),
            vec!["population", "miscellaneous"]
        );
        assert_eq!(c.upstream_version_id.as_deref(), Some(root.id.as_str()));
        assert_eq!(c.result_id, None);
    }

    #[test]
    fn identity_edit_copies_everything_but_id_and_time() {
        let mut s = store();
        let p = s.create_version(Step::IndicatorId, None, &[]).unwrap();
        let c = s.create_version(Step::IndicatorId, Some(&p.id), &[]).unwrap();
        assert_ne!(c.id, p.id);
        assert_ne!(c.created_at, p.created_at);
        assert_eq!(c.indicators, p.indicators);
        assert_eq!(c.variables, p.variables);
        assert_eq!(c.template, p.template);
        assert_eq!(c.parent_id.as_deref(), Some(p.id.as_str()));
    }

    #[test]
    fn appending_to_a_definition() {
        let mut s = store();
        let p = s.create_version(Step::IndicatorId, None, &[]).unwrap();
        let c = s
            .create_version(
                Step::IndicatorId,
                Some(&p.id),
                &[Edit::AppendIndicatorDefinition {
                    indicator: IndicatorKind::Response,
                    text: "This includes improving living conditions.".into(),
                }],
            )
            .unwrap();
        assert!(c
            .indicator(IndicatorKind::Response)
            .definition
            .contains("improving living conditions"));
    }

    #[test]
    fn duplicate_and_reserved_edits_fail() {
        let mut s = store();
        let p = s.create_version(Step::IndicatorId, None, &[]).unwrap();
        let r = s.create_version(
            Step::IndicatorId,
            Some(&p.id),
            &[add(IndicatorKind::Driver, "a"), add(IndicatorKind::Driver, "A")],
        );
        assert!(matches!(r, Err(TaxonomyError::DuplicateVariable { .. })));
        let r = s.create_version(
            Step::IndicatorId,
            Some(&p.id),
            &[add(IndicatorKind::Driver, "Miscellaneous")],
        );
        assert!(matches!(r, Err(TaxonomyError::DuplicateVariable { .. })));
        let r = s.create_version(
            Step::IndicatorId,
            Some(&p.id),
            &[Edit::RemoveVariable {
                indicator: IndicatorKind::State,
                name: MISCELLANEOUS.into(),
            }],
        );
        assert_eq!(r, Err(TaxonomyError::ReservedVariable(IndicatorKind::State)));
        // the same name under another indicator is fine
        let ok = s.create_version(
            Step::IndicatorId,
            Some(&p.id),
            &[add(IndicatorKind::Driver, "x"), add(IndicatorKind::State, "x")],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn upstream_is_required_and_typed() {
        let mut s = store();
        assert_eq!(
            s.create_version(Step::VariableId, None, &[]),
            Err(TaxonomyError::MissingUpstream(Step::VariableId))
        );
        let ind = s.create_version(Step::IndicatorId, None, &[]).unwrap();
        let r = s.create_version(
            Step::LinkId,
            None,
            &[Edit::SetUpstream {
                version_id: ind.id.clone(),
            }],
        );
        assert!(matches!(r, Err(TaxonomyError::WrongUpstream { .. })));
    }

    #[test]
    fn invalid_template_is_rejected() {
        let mut s = store();
        let mut t = PromptTemplate::default_for(Step::IndicatorId);
        t.user.push_str(" ${bogus}");
        let r = s.create_version(Step::IndicatorId, None, &[Edit::SetTemplate { template: t }]);
        assert_eq!(r, Err(TaxonomyError::InvalidTemplate(vec!["bogus".into()])));
    }

    #[test]
    fn exactly_one_reserved_variable_per_indicator() {
        let mut s = store();
        let v = s.create_version(Step::IndicatorId, None, &[]).unwrap();
        for k in IndicatorKind::ALL {
            assert_eq!(v.variables_of(k).filter(|v| v.reserved).count(), 1);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn edit_strategy() -> impl Strategy<Value = (usize, u8, u8)> {
            (0usize..64, 0u8..5, 0u8..6)
        }

        proptest! {
            #[test]
            fn versions_are_immutable_and_lineage_terminates(
                ops in proptest::collection::vec(edit_strategy(), 1..30)
            ) {
                let mut s = store();
                let root = s.create_version(Step::IndicatorId, None, &[]).unwrap();
                let mut snapshots = vec![(root.id.clone(), serde_json::to_string(&root).unwrap())];
                for (parent_pick, kind, name) in ops {
                    let parent = snapshots[parent_pick % snapshots.len()].0.clone();
                    let kind = IndicatorKind::ALL[kind as usize];
                    let edit = add(kind, &format!("var{name}"));
                    if let Ok(v) = s.create_version(Step::IndicatorId, Some(&parent), &[edit]) {
                        snapshots.push((v.id.clone(), serde_json::to_string(&v).unwrap()));
                    }
                }
                for (id, bytes) in &snapshots {
                    prop_assert_eq!(&serde_json::to_string(s.get(id).unwrap()).unwrap(), bytes);
                    let chain = s.lineage(id).unwrap();
                    prop_assert_eq!(chain.last().unwrap(), &root.id);
                }
            }
        }
    }
}
