//! Rule-based flow labeling.
//!
//! Rules come from a CSV file with columns
//! `src_ip,dst_ip,src_port,dst_port,protocol,start_us,end_us,label` where
//! `*` means "any". The first matching rule wins; unmatched flows default
//! to benign.

use std::io::Read;
use std::net::IpAddr;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{
    flow_to_matrix, Flow, LabelCatalog, LabeledDataset, Provenance, Sample, Transport,
};

/// A single rule field: either a wildcard or a concrete value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleField<T> {
    Any,
    Is(T),
}

impl<T: PartialEq> RuleField<T> {
    fn matches(&self, v: &T) -> bool {
        match self {
            RuleField::Any => true,
            RuleField::Is(want) => want == v,
        }
    }

    /// Whether two fields can both match some value.
    fn overlaps(&self, other: &RuleField<T>) -> bool {
        match (self, other) {
            (RuleField::Is(a), RuleField::Is(b)) => a == b,
            _ => true,
        }
    }
}

/// One labeling rule: endpoint pattern, protocol, and a time window in
/// microseconds (inclusive on both ends, matched against first activity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRule {
    pub src_ip: RuleField<IpAddr>,
    pub dst_ip: RuleField<IpAddr>,
    pub src_port: RuleField<u16>,
    pub dst_port: RuleField<u16>,
    pub protocol: RuleField<Transport>,
    pub start_us: u64,
    pub end_us: u64,
    pub label: String,
}

impl LabelRule {
    /// Rules are directionless: either orientation of (src, dst) may match
    /// the canonical key.
    fn matches(&self, flow: &Flow) -> bool {
        if !self.protocol.matches(&flow.key.transport) {
            return false;
        }
        if flow.first_seen_us < self.start_us || flow.first_seen_us > self.end_us {
            return false;
        }
        let k = &flow.key;
        let fwd = self.src_ip.matches(&k.ip_lo)
            && self.src_port.matches(&k.port_lo)
            && self.dst_ip.matches(&k.ip_hi)
            && self.dst_port.matches(&k.port_hi);
        let rev = self.src_ip.matches(&k.ip_hi)
            && self.src_port.matches(&k.port_hi)
            && self.dst_ip.matches(&k.ip_lo)
            && self.dst_port.matches(&k.port_lo);
        fwd || rev
    }

    /// True when some flow could match both rules.
    fn overlaps(&self, other: &LabelRule) -> bool {
        self.start_us <= other.end_us
            && other.start_us <= self.end_us
            && self.protocol.overlaps(&other.protocol)
            && self.src_ip.overlaps(&other.src_ip)
            && self.dst_ip.overlaps(&other.dst_ip)
            && self.src_port.overlaps(&other.src_port)
            && self.dst_port.overlaps(&other.dst_port)
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, what: &str, line: usize) -> Result<RuleField<T>> {
    let raw = raw.trim();
    if raw == "*" {
        return Ok(RuleField::Any);
    }
    raw.parse::<T>()
        .map(RuleField::Is)
        .map_err(|_| Error::LabelRules(format!("line {line}: bad {what} `{raw}`")))
}

/// Parses rules from CSV text. A leading header row is skipped when its
/// first column reads `src_ip`.
pub fn parse_rules<R: Read>(reader: R) -> Result<Vec<LabelRule>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rules = Vec::new();
    for (idx, record) in csv.records().enumerate() {
        let record = record.map_err(|e| Error::LabelRules(format!("csv: {e}")))?;
        let line = idx + 1;
        if idx == 0 && record.get(0).map(|f| f.eq_ignore_ascii_case("src_ip")).unwrap_or(false) {
            continue;
        }
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() != 8 {
            return Err(Error::LabelRules(format!(
                "line {line}: expected 8 columns, found {}",
                record.len()
            )));
        }
        let protocol = {
            let raw = record[4].trim();
            if raw == "*" {
                RuleField::Any
            } else {
                RuleField::Is(raw.parse::<Transport>()?)
            }
        };
        let parse_time = |raw: &str, what: &str| -> Result<u64> {
            raw.trim()
                .parse::<u64>()
                .map_err(|_| Error::LabelRules(format!("line {line}: bad {what} `{raw}`")))
        };
        let rule = LabelRule {
            src_ip: parse_field(&record[0], "src_ip", line)?,
            dst_ip: parse_field(&record[1], "dst_ip", line)?,
            src_port: parse_field(&record[2], "src_port", line)?,
            dst_port: parse_field(&record[3], "dst_port", line)?,
            protocol,
            start_us: parse_time(&record[5], "start_us")?,
            end_us: parse_time(&record[6], "end_us")?,
            label: record[7].trim().to_string(),
        };
        if rule.label.is_empty() {
            return Err(Error::LabelRules(format!("line {line}: empty label")));
        }
        if rule.start_us > rule.end_us {
            return Err(Error::LabelRules(format!("line {line}: start_us after end_us")));
        }
        rules.push(rule);
    }
    Ok(rules)
}

pub fn rules_from_path(path: &Path) -> Result<Vec<LabelRule>> {
    parse_rules(std::fs::File::open(path)?)
}

/// Controls for [`label_flows`].
#[derive(Debug, Clone)]
pub struct LabelOptions {
    /// Zero addresses and checksums before encoding. On by default.
    pub anonymize: bool,
    /// Error on flows that match no rule instead of labeling them benign.
    pub strict_unmatched: bool,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions { anonymize: true, strict_unmatched: false }
    }
}

/// Labels flows by first matching rule and encodes them into a dataset.
///
/// Returns the dataset plus warnings for rule pairs that overlap while
/// carrying different labels (the earlier rule wins for any flow both
/// match).
pub fn label_flows(
    flows: &[Flow],
    rules: &[LabelRule],
    opts: &LabelOptions,
) -> Result<(LabeledDataset, Vec<String>)> {
    let mut warnings = Vec::new();
    for i in 0..rules.len() {
        for j in i + 1..rules.len() {
            if rules[i].label != rules[j].label && rules[i].overlaps(&rules[j]) {
                warnings.push(format!(
                    "rules {} ({}) and {} ({}) overlap; rule {} wins where both match",
                    i + 1,
                    rules[i].label,
                    j + 1,
                    rules[j].label,
                    i + 1,
                ));
            }
        }
    }

    let mut catalog = LabelCatalog::benign_only();
    for rule in rules {
        catalog.intern(&rule.label);
    }

    let mut samples = Vec::with_capacity(flows.len());
    for flow in flows {
        let label = match rules.iter().find(|r| r.matches(flow)) {
            Some(rule) => catalog.id(&rule.label).expect("interned above"),
            None if opts.strict_unmatched => {
                return Err(Error::UnlabeledFlow(flow.key.to_string()));
            }
            None => 0,
        };
        samples.push(Sample { matrix: flow_to_matrix(flow, opts.anonymize), label });
    }

    let dataset = LabeledDataset {
        samples,
        catalog,
        provenance: Provenance::new(format!("labeled capture ({} flows)", flows.len())),
    };
    Ok((dataset, warnings))
}
