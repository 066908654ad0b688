//! Language registry and resource categories.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resource category by share of web-crawl data. Ordered `H < M < L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    H,
    M,
    L,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::H, Category::M, Category::L];

    pub fn label(self) -> &'static str {
        match self {
            Category::H => "High-Resource",
            Category::M => "Medium-Resource",
            Category::L => "Low-Resource",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::H => "H",
            Category::M => "M",
            Category::L => "L",
        })
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" => Ok(Category::H),
            "M" => Ok(Category::M),
            "L" => Ok(Category::L),
            other => Err(Error::invalid(format!("unknown category {other}"))),
        }
    }
}

/// H above 1%, M above 0.1%, L above 0.01%; anything at or below 0.01% is
/// outside the taxonomy.
pub fn categorize_language(cc_ratio_percent: f64) -> Result<Category> {
    if !(cc_ratio_percent > 0.0) || !cc_ratio_percent.is_finite() {
        return Err(Error::invalid(format!("data ratio must be positive, got {cc_ratio_percent}")));
    }
    if cc_ratio_percent > 1.0 {
        Ok(Category::H)
    } else if cc_ratio_percent > 0.1 {
        Ok(Category::M)
    } else if cc_ratio_percent > 0.01 {
        Ok(Category::L)
    } else {
        Err(Error::invalid(format!(
            "data ratio {cc_ratio_percent}% is below the low-resource floor of 0.01%"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Language {
    pub code: String,
    pub name: String,
    pub cc_ratio_percent: f64,
    pub category: Category,
}

impl Language {
    pub fn new(code: &str, name: &str, cc_ratio_percent: f64) -> Result<Self> {
        if code.len() != 2 || !code.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(Error::invalid(format!("language code must be two lowercase letters: {code:?}")));
        }
        Ok(Self {
            code: code.to_string(),
            name: name.to_string(),
            cc_ratio_percent,
            category: categorize_language(cc_ratio_percent)?,
        })
    }
}

const BUILTIN: &[(&str, &str, f64)] = &[
    ("en", "English", 45.8786),
    ("ru", "Russian", 5.9692),
    ("de", "German", 5.8811),
    ("zh", "Chinese", 4.8747),
    ("fr", "French", 4.7254),
    ("es", "Spanish", 4.4690),
    ("it", "Italian", 2.5712),
    ("nl", "Dutch", 2.0585),
    ("vi", "Vietnamese", 1.0299),
    ("id", "Indonesian", 0.7991),
    ("ar", "Arabic", 0.6658),
    ("hu", "Hungarian", 0.6093),
    ("ro", "Romanian", 0.5637),
    ("da", "Danish", 0.4301),
    ("sk", "Slovak", 0.3777),
    ("uk", "Ukrainian", 0.3304),
    ("ca", "Catalan", 0.2314),
    ("sr", "Serbian", 0.2205),
    ("hr", "Croatian", 0.1979),
    ("hi", "Hindi", 0.1588),
    ("bn", "Bengali", 0.0930),
    ("ta", "Tamil", 0.0446),
    ("ne", "Nepali", 0.0304),
    ("ml", "Malayalam", 0.0222),
    ("mr", "Marathi", 0.0213),
    ("te", "Telugu", 0.0183),
    ("kn", "Kannada", 0.0122),
];

/// Ordered set of languages with unique codes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub languages: Vec<Language>,
}

impl Registry {
    /// English plus the 26 target languages with their web-crawl shares.
    pub fn builtin() -> Self {
        Self {
            languages: BUILTIN
                .iter()
                .map(|&(c, n, r)| Language::new(c, n, r).expect("builtin entries are valid"))
                .collect(),
        }
    }

    pub fn from_languages(languages: Vec<Language>) -> Result<Self> {
        let mut reg = Self::default();
        for l in languages {
            reg.push(l)?;
        }
        Ok(reg)
    }

    pub fn push(&mut self, lang: Language) -> Result<()> {
        if self.get(&lang.code).is_some() {
            return Err(Error::invalid(format!("duplicate language code {}", lang.code)));
        }
        self.languages.push(lang);
        Ok(())
    }

    pub fn get(&self, code: &str) -> Option<&Language> {
        self.languages.iter().find(|l| l.code == code)
    }

    pub fn lookup(&self, code: &str) -> Result<&Language> {
        self.get(code)
            .ok_or_else(|| Error::invalid(format!("unknown language code {code}")))
    }

    pub fn by_name(&self, name: &str) -> Option<&Language> {
        self.languages.iter().find(|l| l.name.eq_ignore_ascii_case(name))
    }

    /// One language per line: `code<TAB>name<TAB>ratio`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("code\tname\tcc_ratio_percent\tcategory\n");
        for l in &self.languages {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", l.code, l.name, l.cc_ratio_percent, l.category));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg = Self::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if cols.len() < 3 {
                return Err(bad(format!("expected code, name, ratio: {line:?}")));
            }
            let ratio: f64 = cols[2].parse().map_err(|_| bad(format!("bad ratio {}", cols[2])))?;
            let lang = Language::new(cols[0], cols[1], ratio).map_err(|e| bad(e.to_string()))?;
            if let Some(declared) = cols.get(3) {
                if declared.parse::<Category>()? != lang.category {
                    return Err(bad(format!("category {declared} contradicts ratio {ratio}")));
                }
            }
            reg.push(lang).map_err(|e| bad(e.to_string()))?;
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(categorize_language(5.9692).unwrap(), Category::H);
        assert_eq!(categorize_language(0.6658).unwrap(), Category::M);
        assert_eq!(categorize_language(0.0122).unwrap(), Category::L);
    }

    #[test]
    fn boundaries_are_exclusive() {
        assert_eq!(categorize_language(1.0).unwrap(), Category::M);
        assert_eq!(categorize_language(0.1).unwrap(), Category::L);
        assert!(categorize_language(0.01).is_err());
        assert!(categorize_language(0.0).is_err());
        assert!(categorize_language(-3.0).is_err());
        assert!(categorize_language(f64::NAN).is_err());
    }

    #[test]
    fn builtin_registry_group_sizes() {
        let reg = Registry::builtin();
        assert_eq!(reg.languages.len(), 27);
        let count = |c| reg.languages.iter().filter(|l| l.category == c && l.code != "en").count();
        assert_eq!((count(Category::H), count(Category::M), count(Category::L)), (8, 11, 7));
        assert_eq!(reg.by_name("vietnamese").unwrap().code, "vi");
    }

    #[test]
    fn registry_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("languages.tsv");
        let reg = Registry::builtin();
        reg.save(&p).unwrap();
        assert_eq!(Registry::load(&p).unwrap(), reg);
    }

    #[test]
    fn duplicate_codes_rejected() {
        let l = Language::new("xa", "X", 2.0).unwrap();
        assert!(Registry::from_languages(vec![l.clone(), l]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn category_is_monotone(a in 0.0101f64..100.0, b in 0.0101f64..100.0) {
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                prop_assert!(categorize_language(hi).unwrap() <= categorize_language(lo).unwrap());
            }
        }
    }
}
