//! Element geometry mapping.
//!
//! Tab-separated, one element per line:
//! `element_id  detector  wheel  sector  layer  board  kind`
//! with wheel in 1..=2, sector in 1..=16, layer in 1..=8 and kind one of
//! `rssi`, `hv_voltage`, `hv_current`, `other`. Blank lines, `#` comments and a
//! header line starting with `element_id` are skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AnalysisError;

pub const WHEELS: u8 = 2;
pub const SECTORS: u8 = 16;
pub const LAYERS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Rssi,
    HvVoltage,
    HvCurrent,
    Other,
}

impl FromStr for ElementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "rssi" => Ok(ElementKind::Rssi),
            "hv_voltage" => Ok(ElementKind::HvVoltage),
            "hv_current" => Ok(ElementKind::HvCurrent),
            "other" => Ok(ElementKind::Other),
            other => Err(format!("unknown element kind {other:?}")),
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementKind::Rssi => "rssi",
            ElementKind::HvVoltage => "hv_voltage",
            ElementKind::HvCurrent => "hv_current",
            ElementKind::Other => "other",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementInfo {
    pub detector: String,
    pub wheel: u8,
    pub sector: u8,
    pub layer: u8,
    pub board: String,
    pub kind: ElementKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementMapping {
    elements: BTreeMap<u32, ElementInfo>,
}

impl ElementMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, element_id: u32, info: ElementInfo) -> Result<(), AnalysisError> {
        validate(&info).map_err(|reason| AnalysisError::InvalidMapping {
            element_id,
            reason,
        })?;
        self.elements.insert(element_id, info);
        Ok(())
    }

    pub fn get(&self, element_id: u32) -> Option<&ElementInfo> {
        self.elements.get(&element_id)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &ElementInfo)> {
        self.elements.iter().map(|(id, info)| (*id, info))
    }

    pub fn ids_of_kind(&self, kind: ElementKind) -> Vec<u32> {
        self.iter()
            .filter(|(_, info)| info.kind == kind)
            .map(|(id, _)| id)
            .collect()
    }

    /// Ids from `ids` that are unmapped or mapped to another kind.
    pub fn not_of_kind(&self, ids: impl IntoIterator<Item = u32>, kind: ElementKind) -> Vec<u32> {
        ids.into_iter()
            .filter(|id| self.get(*id).is_none_or(|info| info.kind != kind))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut out = ElementMapping::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') || line.starts_with("element_id") {
                continue;
            }
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 7 {
                return Err((i + 1, format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str, what: &str| -> Result<u64, (usize, String)> {
                s.parse().map_err(|e| (i + 1, format!("bad {what} {s:?}: {e}")))
            };
            let id = u32::try_from(num(f[0], "element_id")?)
                .map_err(|e| (i + 1, format!("bad element_id: {e}")))?;
            let small = |s: &str, what: &str| -> Result<u8, (usize, String)> {
                u8::try_from(num(s, what)?).map_err(|_| (i + 1, format!("{what} {s} out of range")))
            };
            let info = ElementInfo {
                detector: f[1].to_string(),
                wheel: small(f[2], "wheel")?,
                sector: small(f[3], "sector")?,
                layer: small(f[4], "layer")?,
                board: f[5].to_string(),
                kind: f[6].parse().map_err(|e| (i + 1, e))?,
            };
            validate(&info).map_err(|e| (i + 1, e))?;
            if out.elements.insert(id, info).is_some() {
                return Err((i + 1, format!("element {id} mapped twice")));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path).map_err(|e| AnalysisError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|(line, reason)| AnalysisError::MappingFile {
            path: path.to_path_buf(),
            line,
            reason,
        })
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "element_id\tdetector\twheel\tsector\tlayer\tboard\tkind")?;
        for (id, m) in self.iter() {
            writeln!(
                out,
                "{id}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.detector, m.wheel, m.sector, m.layer, m.board, m.kind
            )?;
        }
        out.flush()
    }
}

fn validate(info: &ElementInfo) -> Result<(), String> {
    if !(1..=WHEELS).contains(&info.wheel) {
        return Err(format!("wheel {} outside 1..={WHEELS}", info.wheel));
    }
    if !(1..=SECTORS).contains(&info.sector) {
        return Err(format!("sector {} outside 1..={SECTORS}", info.sector));
    }
    if !(1..=LAYERS).contains(&info.layer) {
        return Err(format!("layer {} outside 1..={LAYERS}", info.layer));
    }
    if info.detector.is_empty() || info.detector.contains(char::is_whitespace) {
        return Err(format!("bad detector name {:?}", info.detector));
    }
    if info.board.contains(char::is_whitespace) {
        return Err(format!("bad board id {:?}", info.board));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "element_id\tdetector\twheel\tsector\tlayer\tboard\tkind\n\
        # two links and one HV channel\n\
        1\tMMG\t1\t7\t3\tL1P3\trssi\n\
        2\tMMG\t2\t16\t8\tL8P6\trssi\n\
        1000\tMMG\t1\t1\t1\tHV0\thv_voltage\n";

    #[test]
    fn parse_and_round_trip() {
        let m = ElementMapping::parse(SAMPLE).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.get(1).unwrap().sector, 7);
        assert_eq!(m.ids_of_kind(ElementKind::Rssi), vec![1, 2]);
        assert_eq!(m.not_of_kind([1, 1000, 5], ElementKind::Rssi), vec![1000, 5]);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(ElementMapping::parse(std::str::from_utf8(&buf).unwrap()).unwrap(), m);
    }

    #[test]
    fn out_of_range_geometry_reports_line() {
        let bad = "1\tMMG\t1\t17\t3\tB\trssi\n";
        let (line, reason) = ElementMapping::parse(bad).unwrap_err();
        assert_eq!(line, 1);
        assert!(reason.contains("sector 17"), "{reason}");
        assert!(ElementMapping::parse("1\tMMG\t3\t1\t1\tB\trssi\n").is_err());
        assert!(ElementMapping::parse("1\tMMG\t1\t1\t9\tB\trssi\n").is_err());
        assert!(ElementMapping::parse("1\tMMG\t1\t1\t1\tB\tlaser\n").is_err());
    }

    #[test]
    fn duplicate_id_rejected() {
        let dup = "1\tMMG\t1\t1\t1\tB\trssi\n1\tMMG\t1\t2\t1\tB\trssi\n";
        assert_eq!(ElementMapping::parse(dup).unwrap_err().0, 2);
    }
}
