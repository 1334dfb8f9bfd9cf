//! User rules: post-hoc must-have / must-not-have overrides on mining
//! results. Rules are stored globally and applied to every version's results
//! at read time. They never reach a prompt.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{IndicatorKind, TaxonomyError, VariableRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleCondition {
    MustHave,
    MustNotHave,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleValue {
    Indicator { indicator: IndicatorKind },
    Variable { variable: VariableRef },
    Link { source: VariableRef, target: VariableRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rule {
    pub snippet_id: String,
    pub condition: RuleCondition,
    pub value: RuleValue,
}

impl Rule {
    pub fn must_have(snippet_id: impl Into<String>, value: RuleValue) -> Self {
        Self {
            snippet_id: snippet_id.into(),
            condition: RuleCondition::MustHave,
            value,
        }
    }

    pub fn must_not_have(snippet_id: impl Into<String>, value: RuleValue) -> Self {
        Self {
            snippet_id: snippet_id.into(),
            condition: RuleCondition::MustNotHave,
            value,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleBook {
    rules: BTreeMap<String, Rule>,
    next_id: u64,
}

impl RuleBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Restores a book from persisted `(id, rule)` pairs.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Rule)>) -> Self {
        let rules: BTreeMap<String, Rule> = entries.into_iter().collect();
        let next_id = rules
            .keys()
            .filter_map(|id| id.strip_prefix("rule-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        Self { rules, next_id }
    }

    /// Stores a rule. Re-adding an identical rule returns its existing id; a
    /// rule contradicting an existing one is rejected.
    pub fn add(&mut self, rule: Rule) -> Result<String, TaxonomyError> {
        for (id, r) in &self.rules {
            if r.snippet_id == rule.snippet_id && r.value == rule.value {
                if r.condition == rule.condition {
                    return Ok(id.clone());
                }
                return Err(TaxonomyError::ConflictingRule(id.clone()));
            }
        }
        self.next_id += 1;
        let id = format!("rule-{}", self.next_id);
        self.rules.insert(id.clone(), rule);
        Ok(id)
    }

    pub fn remove(&mut self, id: &str) -> Result<Rule, TaxonomyError> {
        self.rules
            .remove(id)
            .ok_or_else(|| TaxonomyError::RuleNotFound(id.to_owned()))
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.get(id)
    }

    /// Rules in id order, optionally restricted to one snippet.
    pub fn list(&self, snippet_id: Option<&str>) -> Vec<(&str, &Rule)> {
        self.rules
            .iter()
            .filter(|(_, r)| snippet_id.is_none_or(|s| r.snippet_id == s))
            .map(|(id, r)| (id.as_str(), r))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn driver() -> RuleValue {
        RuleValue::Indicator {
            indicator: IndicatorKind::Driver,
        }
    }

    #[test]
    fn contradicting_rules_are_rejected() {
        let mut book = RuleBook::new();
        let id = book.add(Rule::must_have("s1", driver())).unwrap();
        assert_eq!(
            book.add(Rule::must_not_have("s1", driver())),
            Err(TaxonomyError::ConflictingRule(id.clone()))
        );
        assert_eq!(book.add(Rule::must_have("s1", driver())).unwrap(), id);
        assert!(book.add(Rule::must_not_have("s2", driver())).is_ok());
        assert_eq!(book.list(Some("s1")).len(), 1);
        assert_eq!(book.list(None).len(), 2);
    }

    #[test]
    fn remove_unknown_rule() {
        let mut book = RuleBook::new();
        assert!(matches!(book.remove("rule-9"), Err(TaxonomyError::RuleNotFound(_))));
    }
}
