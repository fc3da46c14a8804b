use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TextError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Normal,
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub index: usize,
    pub name: String,
    pub split: Split,
    pub group: String,
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    labels: Vec<Label>,
}

/// Ordered label set; index 0 is the unique normal label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<Label>,
}

impl LabelSpace {
    /// Validates and orders `labels` by index.
    pub fn new(mut labels: Vec<Label>) -> Result<Self, TextError> {
        labels.sort_by_key(|l| l.index);
        let mut seen_names: HashMap<&str, &str> = HashMap::new();
        for (pos, l) in labels.iter().enumerate() {
            if l.index != pos {
                let msg = if pos > 0 && labels[pos - 1].index == l.index {
                    format!("duplicate index {} (label '{}')", l.index, l.name)
                } else {
                    format!("indices must be contiguous from 0; found {} at position {pos}", l.index)
                };
                return Err(TextError::Schema(msg));
            }
            if let Some(prev_group) = seen_names.insert(&l.name, &l.group) {
                return Err(TextError::Schema(format!(
                    "label '{}' listed twice (groups '{}' and '{}')",
                    l.name, prev_group, l.group
                )));
            }
            if l.group.trim().is_empty() {
                return Err(TextError::Schema(format!("label '{}' has no group", l.name)));
            }
        }
        match labels.first() {
            Some(l) if l.split == Split::Normal => {}
            Some(l) => {
                return Err(TextError::Schema(format!(
                    "index 0 ('{}') must have split=normal",
                    l.name
                )))
            }
            None => return Err(TextError::Schema("label file has no labels".into())),
        }
        if let Some(l) = labels.iter().skip(1).find(|l| l.split == Split::Normal) {
            return Err(TextError::Schema(format!(
                "label '{}' at index {} is a second normal label; normal must be unique at index 0",
                l.name, l.index
            )));
        }
        Ok(Self { labels })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, TextError> {
        let file: LabelsFile =
            serde_json::from_str(text).map_err(|e| TextError::Schema(e.to_string()))?;
        Self::new(file.labels)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LabelsFile {
            labels: self.labels.clone(),
        })
        .expect("labels serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        crate::dataio::write_atomic(path, self.to_json().as_bytes()).map_err(|e| TextError::io(path, e))
    }

    /// Number of labels `c`, normal included.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> Option<&Label> {
        self.labels.get(index)
    }

    pub fn split_of(&self, index: usize) -> Option<Split> {
        self.get(index).map(|l| l.split)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn normal(&self) -> &Label {
        &self.labels[0]
    }

    pub fn anomalies(&self) -> impl Iterator<Item = &Label> {
        self.labels.iter().skip(1)
    }

    pub fn count(&self, split: Split) -> usize {
        self.labels.iter().filter(|l| l.split == split).count()
    }

    /// Anomaly labels keyed by their curated group id.
    pub fn groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for l in self.anomalies() {
            out.entry(l.group.clone()).or_default().push(l.index);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(index: usize, name: &str, split: Split, group: &str) -> Label {
        Label {
            index,
            name: name.into(),
            split,
            group: group.into(),
        }
    }

    #[test]
    fn four_labels() {
        let ls = LabelSpace::new(vec![
            label(0, "normal", Split::Normal, "normal"),
            label(1, "fighting", Split::Base, "violence"),
            label(2, "shooting", Split::Base, "violence"),
            label(3, "riot", Split::Novel, "violence"),
        ])
        .unwrap();
        assert_eq!(ls.len(), 4);
        assert_eq!(ls.count(Split::Base), 2);
        assert_eq!(ls.groups()["violence"], vec![1, 2, 3]);
    }

    #[test]
    fn normal_must_be_at_zero() {
        let err = LabelSpace::new(vec![
            label(0, "fighting", Split::Base, "a"),
            label(1, "shooting", Split::Base, "a"),
            label(2, "riot", Split::Novel, "a"),
            label(3, "normal", Split::Normal, "n"),
        ])
        .unwrap_err();
        assert!(matches!(err, TextError::Schema(ref m) if m.contains("fighting")), "{err}");
    }

    #[test]
    fn duplicate_index_named() {
        let err = LabelSpace::new(vec![
            label(0, "normal", Split::Normal, "n"),
            label(1, "a", Split::Base, "g"),
            label(1, "b", Split::Novel, "g"),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate index 1"), "{err}");
    }

    #[test]
    fn label_in_two_groups() {
        let err = LabelSpace::new(vec![
            label(0, "normal", Split::Normal, "n"),
            label(1, "a", Split::Base, "g1"),
            label(2, "a", Split::Base, "g2"),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("'a'"), "{err}");
    }

    #[test]
    fn xd_violence_style_base_count() {
        let json = r#"{"labels":[
            {"index":0,"name":"normal","split":"normal","group":"normal"},
            {"index":1,"name":"fighting","split":"base","group":"physical"},
            {"index":2,"name":"shooting","split":"base","group":"weapons"},
            {"index":3,"name":"car accident","split":"base","group":"vehicle"},
            {"index":4,"name":"abuse","split":"novel","group":"physical"},
            {"index":5,"name":"explosion","split":"novel","group":"weapons"},
            {"index":6,"name":"riot","split":"novel","group":"physical"}]}"#;
        let ls = LabelSpace::from_json(json).unwrap();
        assert_eq!(ls.count(Split::Base), 3);
        assert_eq!(ls.anomalies().count(), 6);
        assert_eq!(LabelSpace::from_json(&ls.to_json()).unwrap(), ls);
    }
}
