use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::data::{ChatSample, Role, Source, Turn};
use crate::error::{Error, Result};

/// A record dropped under lenient ingestion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub samples: Vec<ChatSample>,
    pub skipped: Vec<SkippedRecord>,
}

fn read_array(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Array(items)) => Ok(items),
        Ok(_) => Err(Error::Parse {
            path: path.to_path_buf(),
            location: "top level".into(),
            message: "expected a JSON array".into(),
        }),
        Err(e) => Err(Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        }),
    }
}

fn str_field<'a>(obj: &'a Map<String, Value>, key: &str) -> std::result::Result<&'a str, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("field {key:?} is not a string")),
        None => Err(format!("missing field {key:?}")),
    }
}

fn category(obj: &Map<String, Value>) -> Option<String> {
    obj.get("category").and_then(Value::as_str).map(str::to_string)
}

fn collect(
    path: &Path,
    items: Vec<Value>,
    lenient: bool,
    parse: impl Fn(&Value) -> std::result::Result<ChatSample, String>,
) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (index, item) in items.iter().enumerate() {
        match parse(item) {
            Ok(s) => out.samples.push(s),
            Err(reason) if lenient => out.skipped.push(SkippedRecord { index, reason }),
            Err(message) => {
                return Err(Error::Record {
                    path: PathBuf::from(path),
                    index,
                    message,
                })
            }
        }
    }
    Ok(out)
}

fn alpaca_record(item: &Value, source: Source) -> std::result::Result<ChatSample, String> {
    let obj = item.as_object().ok_or("record is not an object")?;
    let instruction = str_field(obj, "instruction")?;
    let output = str_field(obj, "output")?;
    let input = match obj.get("input") {
        None | Some(Value::Null) => "",
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err("field \"input\" is not a string".into()),
    };
    let user = if input.trim().is_empty() {
        instruction.to_string()
    } else {
        format!("{instruction}\n{input}")
    };
    Ok(ChatSample {
        turns: vec![Turn::new(Role::User, user), Turn::new(Role::Assistant, output)],
        source,
        category: category(obj),
    })
}

/// Reads an alpaca-format JSON array (`instruction`, optional `input`,
/// `output`). Each record becomes one single-round sample, in file order.
pub fn ingest_alpaca(path: &Path, source: Source, lenient: bool) -> Result<Ingested> {
    let items = read_array(path)?;
    collect(path, items, lenient, |v| alpaca_record(v, source))
}

fn sharegpt_role(from: &str) -> Option<Role> {
    match from {
        "human" | "user" => Some(Role::User),
        "gpt" | "assistant" => Some(Role::Assistant),
        "system" => Some(Role::System),
        _ => None,
    }
}

fn sharegpt_record(item: &Value) -> std::result::Result<ChatSample, String> {
    let obj = item.as_object().ok_or("record is not an object")?;
    let convs = match obj.get("conversations") {
        Some(Value::Array(c)) => c,
        Some(_) => return Err("field \"conversations\" is not an array".into()),
        None => return Err("missing field \"conversations\"".into()),
    };
    let mut turns = Vec::with_capacity(convs.len());
    for (i, c) in convs.iter().enumerate() {
        let c = c.as_object().ok_or_else(|| format!("turn {i} is not an object"))?;
        let from = str_field(c, "from")?;
        let role = sharegpt_role(from).ok_or_else(|| format!("turn {i}: unknown role {from:?}"))?;
        turns.push(Turn::new(role, str_field(c, "value")?));
    }
    while turns.last().is_some_and(|t| t.role != Role::Assistant) {
        turns.pop();
    }
    let sample = ChatSample {
        turns,
        source: Source::Sharegpt,
        category: category(obj),
    };
    sample.validate()?;
    Ok(sample)
}

/// Reads a ShareGPT-format JSON array. `human`/`gpt` map to user/assistant,
/// trailing non-assistant turns are dropped, and the rest must alternate.
pub fn ingest_sharegpt(path: &Path, lenient: bool) -> Result<Ingested> {
    let items = read_array(path)?;
    collect(path, items, lenient, sharegpt_record)
}
