//! Self-describing container for parameter arrays and datasets.
//!
//! Layout:
//!
//! ```text
//! fedrel-container v1
//! key = value            (zero or more header fields, insertion order kept)
//! array <name> <len>     (one line per array)
//! end
//! <little-endian f64 payload of every array, in declaration order>
//! ```
//!
//! Header values are single-line text. The payload is raw IEEE-754 bits, so
//! a write/read cycle is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ModelParams, ModelSpec};

const MAGIC: &str = "fedrel-container v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    header: Vec<(String, String)>,
    arrays: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut c = Container::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        if let Some(slot) = self.header.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.header.push((key.to_string(), value));
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing header field '{key}'")))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("header field '{key}' has unparsable value '{raw}'")))
    }

    pub fn kind(&self) -> Option<&str> {
        self.get("kind")
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Format(format!(
                "expected container kind '{kind}', found {other:?}"
            ))),
        }
    }

    pub fn header(&self) -> &[(String, String)] {
        &self.header
    }

    pub fn push_array(&mut self, name: &str, values: Vec<f64>) -> &mut Self {
        self.arrays.push((name.to_string(), values));
        self
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("missing array '{name}'")))
    }

    pub fn arrays(&self) -> &[(String, Vec<f64>)] {
        &self.arrays
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut text = String::new();
        text.push_str(MAGIC);
        text.push('\n');
        for (k, v) in &self.header {
            if k.is_empty() || k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(Error::Format(format!("header field '{k}' cannot be encoded")));
            }
            text.push_str(&format!("{k} = {v}\n"));
        }
        for (name, values) in &self.arrays {
            if name.is_empty() || name.contains([' ', '\n']) {
                return Err(Error::Format(format!("array name '{name}' cannot be encoded")));
            }
            text.push_str(&format!("array {name} {}\n", values.len()));
        }
        text.push_str("end\n");
        let payload: usize = self.arrays.iter().map(|(_, v)| v.len() * 8).sum();
        let mut out = Vec::with_capacity(text.len() + payload);
        out.extend_from_slice(text.as_bytes());
        for (_, values) in &self.arrays {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
            pos += nl + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(Error::Format("bad magic line".into()));
        }
        let mut c = Container::default();
        let mut lens = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("array ") {
                let (name, len) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| Error::Format(format!("bad array line '{line}'")))?;
                let len: usize = len
                    .parse()
                    .map_err(|_| Error::Format(format!("bad array length in '{line}'")))?;
                lens.push((name.to_string(), len));
            } else if let Some((k, v)) = line.split_once(" = ") {
                c.header.push((k.to_string(), v.to_string()));
            } else {
                return Err(Error::Format(format!("unrecognized header line '{line}'")));
            }
        }
        let expected: usize = lens.iter().map(|(_, l)| l * 8).sum();
        let payload = &bytes[pos..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut words = payload.chunks_exact(8).map(|w| {
            let mut b = [0u8; 8];
            b.copy_from_slice(w);
            f64::from_le_bytes(b)
        });
        for (name, len) in lens {
            let values: Vec<f64> = words.by_ref().take(len).collect();
            c.arrays.push((name, values));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

/// Store one parameter set as `<prefix>base` / `<prefix>head` arrays.
pub fn push_params(c: &mut Container, prefix: &str, params: &ModelParams) {
    c.push_array(&format!("{prefix}base"), params.base.clone());
    c.push_array(&format!("{prefix}head"), params.head.clone());
}

pub fn take_params(c: &Container, prefix: &str, spec: &ModelSpec) -> Result<ModelParams> {
    let params = ModelParams {
        base: c.array(&format!("{prefix}base"))?.to_vec(),
        head: c.array(&format!("{prefix}head"))?.to_vec(),
    };
    if params.base.len() != spec.base_len() || params.head.len() != spec.head_len() {
        return Err(Error::Format(format!(
            "parameter arrays '{prefix}*' do not match spec {spec}"
        )));
    }
    Ok(params)
}

/// Single-model checkpoint with spec and seed lineage in the header.
pub fn model_container(spec: &ModelSpec, params: &ModelParams, lineage: &str) -> Container {
    let mut c = Container::new("model");
    c.set("spec", spec.encode()).set("lineage", lineage);
    push_params(&mut c, "", params);
    c
}

pub fn read_model(c: &Container) -> Result<(ModelSpec, ModelParams)> {
    c.expect_kind("model")?;
    let spec = ModelSpec::decode(c.require("spec")?)?;
    let params = take_params(c, "", &spec)?;
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let spec = ModelSpec::new(4, vec![6], vec![5, 3]).unwrap();
        let mut p = ModelParams::init(&spec, &mut seed::rng(3));
        p.head[0] = -0.0;
        p.base[1] = f64::MIN_POSITIVE / 4.0;
        let c = model_container(&spec, &p, "root=3");
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        let (s2, p2) = read_model(&back).unwrap();
        assert_eq!(s2, spec);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p2.base), bits(&p.base));
        assert_eq!(bits(&p2.head), bits(&p.head));
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("lineage"), Some("root=3"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let spec = ModelSpec::new(2, vec![], vec![2]).unwrap();
        let bytes = model_container(&spec, &ModelParams::zeros(&spec), "x")
            .to_bytes()
            .unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn newline_in_header_value_rejected() {
        let mut c = Container::new("model");
        c.set("note", "a\nb");
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn wrong_kind_rejected() {
        let c = Container::new("dataset");
        assert!(read_model(&c).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip(
            a in proptest::collection::vec(any::<f64>(), 0..40),
            b in proptest::collection::vec(any::<f64>(), 0..40),
            note in "[a-z0-9 ,.=|-]{0,30}",
        ) {
            let mut c = Container::new("test");
            c.set("note", &note);
            c.push_array("a", a.clone()).push_array("b", b.clone());
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.get("note"), Some(note.as_str()));
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.array("a").unwrap()), bits(&a));
            prop_assert_eq!(bits(back.array("b").unwrap()), bits(&b));
        }
    }
}
