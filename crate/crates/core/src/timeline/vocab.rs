use std::collections::{BTreeMap, HashMap, HashSet};

use sha2::{Digest, Sha256};

use super::{confirmed_concepts, PatientRecord, TimelineError, TokenKind, MAX_AGE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabEntry {
    pub value: String,
    pub kind: TokenKind,
    /// Number of distinct patients carrying the token.
    pub frequency: u64,
}

/// Dense token vocabulary: concept entries take ids `0..n_concepts` ordered by
/// descending frequency then code, followed by one AGE entry per year
/// `0..=120`. There is no PAD entry; batches pad with a mask instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<VocabEntry>,
    n_concepts: usize,
    concepts: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from concept entries already in id order plus age
    /// frequencies indexed by year.
    pub fn from_parts(concepts: Vec<(String, u64)>, age_frequency: &[u64]) -> Result<Self, TimelineError> {
        let n_concepts = concepts.len();
        let mut entries: Vec<VocabEntry> = concepts
            .into_iter()
            .map(|(value, frequency)| VocabEntry { value, kind: TokenKind::Concept, frequency })
            .collect();
        for age in 0..=MAX_AGE as usize {
            entries.push(VocabEntry {
                value: age.to_string(),
                kind: TokenKind::Age,
                frequency: age_frequency.get(age).copied().unwrap_or(0),
            });
        }
        let mut map = HashMap::new();
        for (i, e) in entries[..n_concepts].iter().enumerate() {
            if map.insert(e.value.clone(), i).is_some() {
                return Err(TimelineError::Parse {
                    path: "<vocab>".into(),
                    line: i + 1,
                    detail: format!("duplicate concept {}", e.value),
                });
            }
        }
        Ok(Self { entries, n_concepts, concepts: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    /// Panics if `id` is out of range.
    pub fn entry(&self, id: usize) -> &VocabEntry {
        &self.entries[id]
    }

    pub fn get(&self, id: usize) -> Option<&VocabEntry> {
        self.entries.get(id)
    }

    pub fn concept_id(&self, code: &str) -> Option<usize> {
        self.concepts.get(code).copied()
    }

    pub fn age_id(&self, age: i64) -> Option<usize> {
        (0..=MAX_AGE).contains(&age).then(|| self.n_concepts + age as usize)
    }

    pub fn is_concept(&self, id: usize) -> bool {
        id < self.n_concepts
    }

    pub fn age_of(&self, id: usize) -> Option<i64> {
        (id >= self.n_concepts && id < self.entries.len()).then(|| (id - self.n_concepts) as i64)
    }

    pub fn kind(&self, id: usize) -> Option<TokenKind> {
        self.entries.get(id).map(|e| e.kind)
    }

    /// Resolves a `(kind, value)` pair as it appears in serialized timelines.
    pub fn lookup(&self, kind: TokenKind, value: &str) -> Option<usize> {
        match kind {
            TokenKind::Concept => self.concept_id(value),
            TokenKind::Age => value.parse::<i64>().ok().and_then(|a| self.age_id(a)),
            TokenKind::Pad => None,
        }
    }

    /// Tab-separated `value, kind, id, frequency`, one entry per line in id order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.value, e.kind, i, e.frequency));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, TimelineError> {
        let err = |line: usize, detail: String| TimelineError::Parse { path: "<vocab>".into(), line, detail };
        let mut concepts = Vec::new();
        let mut ages = vec![0u64; MAX_AGE as usize + 1];
        let mut seen_ages = 0;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(n + 1, format!("expected 4 fields, found {}", fields.len())));
            }
            let kind: TokenKind = fields[1].parse().map_err(|e| err(n + 1, e))?;
            let id: usize = fields[2].parse().map_err(|_| err(n + 1, format!("bad id {:?}", fields[2])))?;
            let freq: u64 = fields[3].parse().map_err(|_| err(n + 1, format!("bad frequency {:?}", fields[3])))?;
            match kind {
                TokenKind::Concept => {
                    if id != concepts.len() || seen_ages > 0 {
                        return Err(err(n + 1, format!("concept id {id} out of order")));
                    }
                    concepts.push((fields[0].to_string(), freq));
                }
                TokenKind::Age => {
                    let age: usize = fields[0].parse().map_err(|_| err(n + 1, format!("bad age {:?}", fields[0])))?;
                    if age != seen_ages || id != concepts.len() + age {
                        return Err(err(n + 1, format!("age entry {age} with id {id} out of order")));
                    }
                    ages[age] = freq;
                    seen_ages += 1;
                }
                TokenKind::Pad => return Err(err(n + 1, "PAD entries are not stored".into())),
            }
        }
        if seen_ages != MAX_AGE as usize + 1 {
            return Err(err(0, format!("expected {} age entries, found {seen_ages}", MAX_AGE + 1)));
        }
        Self::from_parts(concepts, &ages)
    }

    /// Hex SHA-256 of the TSV serialization; checkpoints record it.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the vocabulary from filtered records.
///
/// A concept's frequency is the number of distinct patients whose confirmed
/// concept set (at least `min_confirmations` mentions) contains it; concepts
/// below `min_frequency` are excluded. An age's frequency counts patients with
/// a confirmed concept first seen at that age.
pub fn build_vocab(
    records: &[PatientRecord],
    min_frequency: u64,
    min_confirmations: usize,
) -> Result<Vocab, TimelineError> {
    if records.is_empty() {
        return Err(TimelineError::EmptyCorpus);
    }
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    let mut ages = vec![0u64; MAX_AGE as usize + 1];
    for r in records {
        let confirmed = confirmed_concepts(r, min_confirmations);
        let mut patient_ages = HashSet::new();
        for (c, age) in confirmed {
            *freq.entry(c).or_default() += 1;
            if (0..=MAX_AGE).contains(&age) && patient_ages.insert(age) {
                ages[age as usize] += 1;
            }
        }
    }
    let mut concepts: Vec<(String, u64)> =
        freq.into_iter().filter(|&(_, f)| f >= min_frequency).map(|(c, f)| (c.to_string(), f)).collect();
    concepts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_parts(concepts, &ages)
}
