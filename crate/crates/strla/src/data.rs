//! Dataset preparation: tabular→JSON conversion through schema templates,
//! class rebalancing, JSON-lines datasets, and the feature-vector encoding
//! used by the MLP baseline.

use crate::stree::{parse_json, to_json_string, Element, Value};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("schema references missing column '{0}'")]
    MissingColumn(String),
    #[error("cannot coerce '{value}' (column '{column}') to {wanted}")]
    TypeCoercion { column: String, value: String, wanted: &'static str },
    #[error("invalid schema: {0}")]
    BadSchema(String),
    #[error("invalid table: {0}")]
    BadTable(String),
    #[error("invalid dataset line {line}: {message}")]
    BadDataset { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] crate::stree::SyntaxError),
    #[error(transparent)]
    Xml(#[from] crate::xmltree::XmlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DataError>;

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// A comma-separated table with a header row naming the columns.
#[derive(Debug, Clone)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != headers.len() {
                return Err(DataError::BadTable(format!(
                    "row {i} has {} fields, header has {}",
                    row.len(),
                    headers.len()
                )));
            }
        }
        Ok(Table { headers, rows })
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            rows.push(record?.iter().map(str::to_string).collect());
        }
        Table::new(headers, rows)
    }

    pub fn to_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(&self.headers)?;
        for row in &self.rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

// ---------------------------------------------------------------------------
// Schema templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Transform {
    /// Keep the raw text.
    Str,
    /// Number when the text parses as one, text otherwise.
    Auto,
    Number,
    Bool,
    /// Look the raw value up in a named map, fall back to Auto.
    Map(String),
}

#[derive(Debug, Clone)]
enum Node {
    Literal(Element),
    Column { name: String, transform: Transform },
    Array(Vec<Node>),
    Object(Vec<(String, Node)>),
}

/// A JSON document whose leaves may reference table columns as
/// `"${column}"` or `"${column:transform}"` with transforms `str`, `auto`,
/// `number`, `bool`, and `map:<name>`. Named value maps live under `$maps`;
/// an optional `$label` reference names the label column.
///
/// Missing source values (`?`) become null leaves.
#[derive(Debug, Clone)]
pub struct SchemaTemplate {
    root: Node,
    maps: HashMap<String, Vec<(String, Element)>>,
    label: Option<(String, Transform)>,
}

fn parse_ref(text: &str) -> Option<(String, Option<String>)> {
    let inner = text.strip_prefix("${")?.strip_suffix('}')?;
    match inner.split_once(':') {
        Some((name, t)) => Some((name.to_string(), Some(t.to_string()))),
        None => Some((inner.to_string(), None)),
    }
}

impl SchemaTemplate {
    pub fn from_json(text: &str) -> Result<Self> {
        let root = parse_json(text)?;
        let (template, maps_elem, label_elem) = match &root.value {
            Value::Object(members) if members.iter().any(|(n, _)| n == "$template") => {
                let mut template = None;
                let mut maps = None;
                let mut label = None;
                for (name, value) in members {
                    match name.as_str() {
                        "$template" => template = Some(value),
                        "$maps" => maps = Some(value),
                        "$label" => label = Some(value),
                        other => {
                            return Err(DataError::BadSchema(format!(
                                "unexpected top-level member '{other}'"
                            )))
                        }
                    }
                }
                (template.unwrap(), maps, label)
            }
            _ => (&root, None, None),
        };

        let mut maps = HashMap::new();
        if let Some(m) = maps_elem {
            let members = match &m.value {
                Value::Object(members) => members,
                _ => return Err(DataError::BadSchema("$maps must be an object".into())),
            };
            for (map_name, map_value) in members {
                let entries = match &map_value.value {
                    Value::Object(e) => e,
                    _ => {
                        return Err(DataError::BadSchema(format!(
                            "map '{map_name}' must be an object"
                        )))
                    }
                };
                let mut pairs = Vec::new();
                for (k, v) in entries {
                    if v.is_container() {
                        return Err(DataError::BadSchema(format!(
                            "map '{map_name}' values must be scalars"
                        )));
                    }
                    pairs.push((k.clone(), v.clone()));
                }
                maps.insert(map_name.clone(), pairs);
            }
        }

        let label = match label_elem {
            None => None,
            Some(e) => match &e.value {
                Value::Text(s) => match Self::build_node(e, &maps)? {
                    Node::Column { name, transform } => Some((name, transform)),
                    _ => {
                        return Err(DataError::BadSchema(format!(
                            "$label must be a \"${{column}}\" reference, got '{s}'"
                        )))
                    }
                },
                _ => return Err(DataError::BadSchema("$label must be a string".into())),
            },
        };

        let root = Self::build_node(template, &maps)?;
        Ok(SchemaTemplate { root, maps, label })
    }

    fn build_node(
        e: &Element,
        maps: &HashMap<String, Vec<(String, Element)>>,
    ) -> Result<Node> {
        Ok(match &e.value {
            Value::Text(s) => match parse_ref(s) {
                Some((name, transform)) => {
                    let transform = match transform.as_deref() {
                        None | Some("str") => Transform::Str,
                        Some("auto") => Transform::Auto,
                        Some("number") => Transform::Number,
                        Some("bool") => Transform::Bool,
                        Some(t) if t.starts_with("map:") => {
                            let map_name = &t[4..];
                            if !maps.contains_key(map_name) {
                                return Err(DataError::BadSchema(format!(
                                    "unknown map '{map_name}'"
                                )));
                            }
                            Transform::Map(map_name.to_string())
                        }
                        Some(other) => {
                            return Err(DataError::BadSchema(format!(
                                "unknown transform '{other}'"
                            )))
                        }
                    };
                    Node::Column { name, transform }
                }
                None => Node::Literal(e.clone()),
            },
            Value::Array(items) => Node::Array(
                items.iter().map(|i| Self::build_node(i, maps)).collect::<Result<_>>()?,
            ),
            Value::Object(members) => Node::Object(
                members
                    .iter()
                    .map(|(n, v)| Ok((n.clone(), Self::build_node(v, maps)?)))
                    .collect::<Result<_>>()?,
            ),
            _ => Node::Literal(e.clone()),
        })
    }

    /// The label column named by `$label`, when present.
    pub fn label_column(&self) -> Option<&str> {
        self.label.as_ref().map(|(name, _)| name.as_str())
    }

    /// The label string of one row (after the `$label` transform, if any).
    pub fn label_of(&self, table: &Table, row: &[String]) -> Result<String> {
        let (name, transform) = self
            .label
            .as_ref()
            .ok_or_else(|| DataError::BadSchema("schema has no $label".into()))?;
        let idx =
            table.column_index(name).ok_or_else(|| DataError::MissingColumn(name.clone()))?;
        let value = self.leaf(name, transform, &row[idx])?;
        Ok(match &value.value {
            Value::Text(s) => s.clone(),
            Value::Number(x) => crate::stree::render_number(*x),
            Value::Boolean(Some(true)) => "true".to_string(),
            Value::Boolean(Some(false)) => "false".to_string(),
            Value::Boolean(None) => "null".to_string(),
            _ => return Err(DataError::BadSchema("$label must map to a scalar".into())),
        })
    }

    /// Check every referenced column against the table header.
    pub fn validate(&self, table: &Table) -> Result<()> {
        fn walk(node: &Node, table: &Table) -> Result<()> {
            match node {
                Node::Column { name, .. } => {
                    if table.column_index(name).is_none() {
                        return Err(DataError::MissingColumn(name.clone()));
                    }
                }
                Node::Array(items) => {
                    for i in items {
                        walk(i, table)?;
                    }
                }
                Node::Object(members) => {
                    for (_, v) in members {
                        walk(v, table)?;
                    }
                }
                Node::Literal(_) => {}
            }
            Ok(())
        }
        walk(&self.root, table)?;
        if let Some((label, _)) = &self.label {
            if table.column_index(label).is_none() {
                return Err(DataError::MissingColumn(label.clone()));
            }
        }
        Ok(())
    }

    fn leaf(&self, column: &str, transform: &Transform, raw: &str) -> Result<Element> {
        if raw == "?" {
            return Ok(Element::boolean(None));
        }
        Ok(match transform {
            Transform::Str => Element::text(raw),
            Transform::Auto => match raw.parse::<f64>() {
                Ok(x) if x.is_finite() => Element::number(x),
                _ => Element::text(raw),
            },
            Transform::Number => match raw.parse::<f64>() {
                Ok(x) if x.is_finite() => Element::number(x),
                _ => {
                    return Err(DataError::TypeCoercion {
                        column: column.to_string(),
                        value: raw.to_string(),
                        wanted: "number",
                    })
                }
            },
            Transform::Bool => match raw.to_ascii_lowercase().as_str() {
                "true" | "t" | "yes" | "y" | "1" => Element::boolean(Some(true)),
                "false" | "f" | "no" | "n" | "0" => Element::boolean(Some(false)),
                _ => {
                    return Err(DataError::TypeCoercion {
                        column: column.to_string(),
                        value: raw.to_string(),
                        wanted: "boolean",
                    })
                }
            },
            Transform::Map(name) => {
                let pairs = &self.maps[name];
                match pairs.iter().find(|(k, _)| k == raw) {
                    Some((_, v)) => v.clone(),
                    None => self.leaf(column, &Transform::Auto, raw)?,
                }
            }
        })
    }

    fn instantiate_node(&self, node: &Node, table: &Table, row: &[String]) -> Result<Element> {
        Ok(match node {
            Node::Literal(e) => e.clone(),
            Node::Column { name, transform } => {
                let idx = table
                    .column_index(name)
                    .ok_or_else(|| DataError::MissingColumn(name.clone()))?;
                self.leaf(name, transform, &row[idx])?
            }
            Node::Array(items) => Element::array(
                items
                    .iter()
                    .map(|i| self.instantiate_node(i, table, row))
                    .collect::<Result<_>>()?,
            ),
            Node::Object(members) => Element::object(
                members
                    .iter()
                    .map(|(n, v)| Ok((n.clone(), self.instantiate_node(v, table, row)?)))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    pub fn instantiate(&self, table: &Table, row: &[String]) -> Result<Element> {
        self.instantiate_node(&self.root, table, row)
    }
}

/// One semantic tree per table row, with the label read from the schema's
/// `$label` column.
pub fn convert_table(table: &Table, schema: &SchemaTemplate) -> Result<Vec<(Element, String)>> {
    schema.validate(table)?;
    table
        .rows()
        .iter()
        .map(|row| Ok((schema.instantiate(table, row)?, schema.label_of(table, row)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// JSON-lines datasets
// ---------------------------------------------------------------------------

/// Write the JSON-lines dataset format: one `{"input": ..., "label": ...}`
/// object per line.
pub fn write_jsonl(path: impl AsRef<Path>, examples: &[(Element, String)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (input, label) in examples {
        let line = to_json_string(&Element::object(vec![
            ("input".to_string(), input.clone()),
            ("label".to_string(), Element::text(label.clone())),
        ]));
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<(Element, String)>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let root = parse_json(&line)?;
        let members = match root.value {
            Value::Object(m) => m,
            _ => {
                return Err(DataError::BadDataset {
                    line: lineno + 1,
                    message: "line is not a JSON object".into(),
                })
            }
        };
        let mut input = None;
        let mut label = None;
        for (name, value) in members {
            match name.as_str() {
                "input" => input = Some(value),
                "label" => match value.value {
                    Value::Text(s) => label = Some(s),
                    _ => {
                        return Err(DataError::BadDataset {
                            line: lineno + 1,
                            message: "label must be a string".into(),
                        })
                    }
                },
                other => {
                    return Err(DataError::BadDataset {
                        line: lineno + 1,
                        message: format!("unexpected member '{other}'"),
                    })
                }
            }
        }
        match (input, label) {
            (Some(i), Some(l)) => out.push((i, l)),
            _ => {
                return Err(DataError::BadDataset {
                    line: lineno + 1,
                    message: "line needs both 'input' and 'label'".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Reinterpret dataset inputs as XML: each input must be a string holding a
/// reduced-XML document, which is parsed into its semantic tree.
pub fn parse_xml_inputs(examples: Vec<(Element, String)>) -> Result<Vec<(Element, String)>> {
    examples
        .into_iter()
        .enumerate()
        .map(|(i, (input, label))| match &input.value {
            Value::Text(xml) => Ok((crate::xmltree::parse_xml_reduced(xml)?, label)),
            _ => Err(DataError::BadDataset {
                line: i + 1,
                message: "xml datasets carry the document as a string input".into(),
            }),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rebalancing
// ---------------------------------------------------------------------------

/// Under-sample the dominant class to a 2:1 split, but only when it holds
/// more than 80% of the examples. Kept examples preserve their original
/// order; every minority-class example survives.
pub fn rebalance(examples: &[(Element, String)], seed: u64) -> Vec<(Element, String)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for (_, label) in examples {
        match counts.iter_mut().find(|(l, _)| l == label) {
            Some((_, c)) => *c += 1,
            None => counts.push((label, 1)),
        }
    }
    let total = examples.len();
    let (dominant, dom_count) = match counts.iter().max_by_key(|(_, c)| *c) {
        Some(&(l, c)) => (l.to_string(), c),
        None => return Vec::new(),
    };
    if (dom_count as f64) <= 0.8 * total as f64 {
        return examples.to_vec();
    }
    let rest = total - dom_count;
    let keep = dom_count.min(2 * rest);
    let dom_indices: Vec<usize> = examples
        .iter()
        .enumerate()
        .filter(|(_, (_, l))| *l == dominant)
        .map(|(i, _)| i)
        .collect();
    let mut shuffled = dom_indices;
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[16] = 0x52; // domain tag: rebalance
    shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::from_seed(bytes));
    let kept: std::collections::HashSet<usize> = shuffled.into_iter().take(keep).collect();
    examples
        .iter()
        .enumerate()
        .filter(|(i, (_, l))| *l != dominant || kept.contains(i))
        .map(|(_, e)| e.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Featurization (MLP baseline input)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ColumnFeature {
    /// Standardized numeric column; `?` imputes the training mean.
    Numeric { index: usize, mean: f64, std: f64 },
    /// One-hot over the training vocabulary; unseen values encode as zeros.
    Categorical { index: usize, vocab: Vec<String> },
}

/// Fixed-width real encoding of table rows: one-hot categoricals followed by
/// standardized numerics, fitted on a training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Featurizer {
    columns: Vec<ColumnFeature>,
    dim: usize,
}

impl Featurizer {
    pub fn fit(table: &Table, train_idx: &[usize], label_column: &str) -> Result<Featurizer> {
        let mut columns = Vec::new();
        let mut dim = 0usize;
        for (ci, name) in table.headers().iter().enumerate() {
            if name == label_column {
                continue;
            }
            let values: Vec<&str> =
                train_idx.iter().map(|&r| table.rows()[r][ci].as_str()).collect();
            let non_missing: Vec<f64> = values
                .iter()
                .filter(|v| **v != "?")
                .filter_map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect();
            let all_numeric = values.iter().filter(|v| **v != "?").count() == non_missing.len()
                && !non_missing.is_empty();
            if all_numeric {
                let n = non_missing.len() as f64;
                let mean = non_missing.iter().sum::<f64>() / n;
                let var =
                    non_missing.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                columns.push(ColumnFeature::Numeric { index: ci, mean, std: var.sqrt() });
                dim += 1;
            } else {
                let mut vocab: Vec<String> = Vec::new();
                for v in values {
                    if !vocab.iter().any(|x| x == v) {
                        vocab.push(v.to_string());
                    }
                }
                dim += vocab.len();
                columns.push(ColumnFeature::Categorical { index: ci, vocab });
            }
        }
        Ok(Featurizer { columns, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn transform(&self, row: &[String]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for col in &self.columns {
            match col {
                ColumnFeature::Numeric { index, mean, std } => {
                    let x = match row[*index].as_str() {
                        "?" => *mean,
                        v => v.parse::<f64>().unwrap_or(*mean),
                    };
                    out.push(if *std > 0.0 { (x - mean) / std } else { x - mean });
                }
                ColumnFeature::Categorical { index, vocab } => {
                    let v = &row[*index];
                    for entry in vocab {
                        out.push(if entry == v { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        out
    }
}
