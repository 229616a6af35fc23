//! Semantic-tree data model, JSON parsing, and element paths.
//!
//! A document is a tree of [`Element`]s: leaves carry typed primitives
//! (number, text, boolean-or-null), branches are containers (array of raw
//! elements, object of named members). Member names are the "wrappers" that
//! element paths are made of; an optional description payload carries XML
//! attributes and is always empty for JSON-derived trees.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Element type tag. `Text` is the string primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    Number,
    Text,
    Boolean,
    Array,
    Object,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Number => "number",
            Kind::Text => "string",
            Kind::Boolean => "boolean",
            Kind::Array => "array",
            Kind::Object => "object",
        };
        f.write_str(s)
    }
}

/// Payload of an element; exactly one variant per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Number(f64),
    Text(String),
    /// `None` encodes JSON `null` as a third boolean state.
    Boolean(Option<bool>),
    Array(Vec<Element>),
    /// Ordered members; duplicate names are preserved in document order.
    Object(Vec<(String, Element)>),
}

/// A node of a semantic tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub value: Value,
    /// XML attributes land here; always empty for JSON-derived elements.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub description: Vec<(String, String)>,
}

impl Element {
    pub fn new(value: Value) -> Self {
        Element { value, description: Vec::new() }
    }

    pub fn number(x: f64) -> Self {
        Element::new(Value::Number(x))
    }

    pub fn text(s: impl Into<String>) -> Self {
        Element::new(Value::Text(s.into()))
    }

    pub fn boolean(v: Option<bool>) -> Self {
        Element::new(Value::Boolean(v))
    }

    pub fn array(items: Vec<Element>) -> Self {
        Element::new(Value::Array(items))
    }

    pub fn object(members: Vec<(String, Element)>) -> Self {
        Element::new(Value::Object(members))
    }

    pub fn kind(&self) -> Kind {
        match self.value {
            Value::Number(_) => Kind::Number,
            Value::Text(_) => Kind::Text,
            Value::Boolean(_) => Kind::Boolean,
            Value::Array(_) => Kind::Array,
            Value::Object(_) => Kind::Object,
        }
    }

    pub fn is_container(&self) -> bool {
        matches!(self.value, Value::Array(_) | Value::Object(_))
    }
}

/// Sequence of wrapper names from an ancestor down to an element.
///
/// The canonical rendering joins segments with `/` in root-to-element order;
/// the root path renders as the empty string. Segments containing `/` are
/// escaped as `\/` so canonical strings stay injective.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ElementPath {
    segments: Vec<String>,
}

pub fn escape_segment(seg: &str) -> String {
    seg.replace('/', "\\/")
}

impl ElementPath {
    pub fn root() -> Self {
        ElementPath::default()
    }

    pub fn from_segments(segments: Vec<String>) -> Self {
        ElementPath { segments }
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn child(&self, name: &str) -> Self {
        let mut segments = self.segments.clone();
        segments.push(name.to_string());
        ElementPath { segments }
    }

    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                out.push('/');
            }
            out.push_str(&escape_segment(seg));
        }
        out
    }
}

impl fmt::Display for ElementPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Children of a container with their paths.
///
/// Object members are wrapped: the member name extends the path. Array items
/// are raw: the path is unchanged, unless `ordinal_mode` is on, in which case
/// items get 1-based ordinal segments ("1", "2", ...).
pub fn child_paths<'e>(
    element: &'e Element,
    path: &ElementPath,
    ordinal_mode: bool,
) -> Vec<(&'e Element, ElementPath)> {
    match &element.value {
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let p = if ordinal_mode {
                    path.child(&(i + 1).to_string())
                } else {
                    path.clone()
                };
                (item, p)
            })
            .collect(),
        Value::Object(members) => members
            .iter()
            .map(|(name, child)| (child, path.child(name)))
            .collect(),
        _ => Vec::new(),
    }
}

/// Depth-first enumeration of every element's (type tag, canonical path),
/// deduplicated in first-visit order.
pub fn collect_paths(root: &Element, ordinal_mode: bool) -> Vec<(Kind, String)> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut stack = vec![(root, ElementPath::root())];
    while let Some((e, path)) = stack.pop() {
        let entry = (e.kind(), path.canonical());
        if seen.insert(entry.clone()) {
            out.push(entry);
        }
        let children = child_paths(e, &path, ordinal_mode);
        // preserve document order under the LIFO stack
        for pair in children.into_iter().rev() {
            stack.push(pair);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSON parsing
// ---------------------------------------------------------------------------

/// Error for malformed JSON input; no partial trees are ever returned.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at byte {position}: expected {expected}")]
pub struct SyntaxError {
    pub position: usize,
    pub expected: String,
}

struct JsonParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> JsonParser<'a> {
    fn err<T>(&self, expected: &str) -> Result<T, SyntaxError> {
        Err(SyntaxError { position: self.pos, expected: expected.to_string() })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while let Some(b) = self.peek() {
            if b == b' ' || b == b'\t' || b == b'\n' || b == b'\r' {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn expect(&mut self, b: u8, what: &str) -> Result<(), SyntaxError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(what)
        }
    }

    fn parse_value(&mut self) -> Result<Element, SyntaxError> {
        self.skip_ws();
        match self.peek() {
            Some(b'{') => self.parse_object(),
            Some(b'[') => self.parse_array(),
            Some(b'"') => Ok(Element::text(self.parse_string()?)),
            Some(b't') => self.parse_literal("true", Element::boolean(Some(true))),
            Some(b'f') => self.parse_literal("false", Element::boolean(Some(false))),
            Some(b'n') => self.parse_literal("null", Element::boolean(None)),
            Some(b) if b == b'-' || b.is_ascii_digit() => self.parse_number(),
            _ => self.err("a JSON value"),
        }
    }

    fn parse_literal(&mut self, lit: &str, value: Element) -> Result<Element, SyntaxError> {
        if self.bytes[self.pos..].starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            Ok(value)
        } else {
            self.err(&format!("literal '{lit}'"))
        }
    }

    fn parse_object(&mut self) -> Result<Element, SyntaxError> {
        self.expect(b'{', "'{'")?;
        let mut members = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b'}') {
            self.pos += 1;
            return Ok(Element::object(members));
        }
        loop {
            self.skip_ws();
            if self.peek() != Some(b'"') {
                return self.err("a quoted member name");
            }
            let name = self.parse_string()?;
            if name.is_empty() {
                return self.err("a non-empty member name");
            }
            self.skip_ws();
            self.expect(b':', "':'")?;
            let value = self.parse_value()?;
            members.push((name, value));
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {
                    self.pos += 1;
                    return Ok(Element::object(members));
                }
                _ => return self.err("',' or '}'"),
            }
        }
    }

    fn parse_array(&mut self) -> Result<Element, SyntaxError> {
        self.expect(b'[', "'['")?;
        let mut items = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(Element::array(items));
        }
        loop {
            items.push(self.parse_value()?);
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b']') => {
                    self.pos += 1;
                    return Ok(Element::array(items));
                }
                _ => return self.err("',' or ']'"),
            }
        }
    }

    fn parse_string(&mut self) -> Result<String, SyntaxError> {
        self.expect(b'"', "'\"'")?;
        let mut out = String::new();
        loop {
            let start = self.pos;
            // run of plain bytes
            while let Some(b) = self.peek() {
                if b == b'"' || b == b'\\' || b < 0x20 {
                    break;
                }
                self.pos += 1;
            }
            if self.pos > start {
                let chunk = std::str::from_utf8(&self.bytes[start..self.pos])
                    .map_err(|_| SyntaxError {
                        position: start,
                        expected: "valid UTF-8 string content".to_string(),
                    })?;
                out.push_str(chunk);
            }
            match self.peek() {
                Some(b'"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some(b'\\') => {
                    self.pos += 1;
                    out.push(self.parse_escape()?);
                }
                _ => return self.err("'\"' closing the string"),
            }
        }
    }

    fn parse_escape(&mut self) -> Result<char, SyntaxError> {
        let c = match self.peek() {
            Some(b'"') => '"',
            Some(b'\\') => '\\',
            Some(b'/') => '/',
            Some(b'b') => '\u{0008}',
            Some(b'f') => '\u{000C}',
            Some(b'n') => '\n',
            Some(b'r') => '\r',
            Some(b't') => '\t',
            Some(b'u') => {
                self.pos += 1;
                let hi = self.parse_hex4()?;
                if (0xD800..0xDC00).contains(&hi) {
                    // surrogate pair
                    if self.peek() == Some(b'\\') {
                        self.pos += 1;
                        if self.peek() != Some(b'u') {
                            return self.err("'u' of a low surrogate escape");
                        }
                        self.pos += 1;
                        let lo = self.parse_hex4()?;
                        if !(0xDC00..0xE000).contains(&lo) {
                            return self.err("a low surrogate");
                        }
                        let cp = 0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00);
                        return char::from_u32(cp).map_or_else(
                            || self.err("a valid unicode scalar"),
                            Ok,
                        );
                    }
                    return self.err("a low surrogate escape");
                }
                return char::from_u32(hi).map_or_else(|| self.err("a valid unicode scalar"), Ok);
            }
            _ => return self.err("a valid escape character"),
        };
        self.pos += 1;
        Ok(c)
    }

    fn parse_hex4(&mut self) -> Result<u32, SyntaxError> {
        if self.pos + 4 > self.bytes.len() {
            return self.err("four hex digits");
        }
        let s = std::str::from_utf8(&self.bytes[self.pos..self.pos + 4])
            .ok()
            .and_then(|s| u32::from_str_radix(s, 16).ok());
        match s {
            Some(v) => {
                self.pos += 4;
                Ok(v)
            }
            None => self.err("four hex digits"),
        }
    }

    fn parse_number(&mut self) -> Result<Element, SyntaxError> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        match self.peek() {
            Some(b'0') => self.pos += 1,
            Some(b) if b.is_ascii_digit() => {
                while self.peek().map_or(false, |b| b.is_ascii_digit()) {
                    self.pos += 1;
                }
            }
            _ => return self.err("a digit"),
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            if !self.peek().map_or(false, |b| b.is_ascii_digit()) {
                return self.err("a digit after '.'");
            }
            while self.peek().map_or(false, |b| b.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            self.pos += 1;
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if !self.peek().map_or(false, |b| b.is_ascii_digit()) {
                return self.err("a digit in the exponent");
            }
            while self.peek().map_or(false, |b| b.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        match text.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Element::number(x)),
            _ => Err(SyntaxError { position: start, expected: "a finite number".to_string() }),
        }
    }
}

/// Parse a JSON document into a semantic tree.
///
/// Document order of array items and object members is preserved, duplicate
/// member names are kept, and `null` parses as the third boolean state.
pub fn parse_json(text: &str) -> Result<Element, SyntaxError> {
    let mut p = JsonParser { bytes: text.as_bytes(), pos: 0 };
    let root = p.parse_value()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return p.err("end of input");
    }
    Ok(root)
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

/// Shortest decimal rendering that round-trips the exact f64 value.
/// Integral values render without a decimal point ("6", not "6.0").
pub fn render_number(x: f64) -> String {
    format!("{x}")
}

fn escape_json_into(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\u{0008}' => out.push_str("\\b"),
            '\u{000C}' => out.push_str("\\f"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}

fn write_element(e: &Element, out: &mut String) {
    match &e.value {
        Value::Number(x) => out.push_str(&render_number(*x)),
        Value::Text(s) => escape_json_into(s, out),
        Value::Boolean(Some(true)) => out.push_str("true"),
        Value::Boolean(Some(false)) => out.push_str("false"),
        Value::Boolean(None) => out.push_str("null"),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_element(item, out);
            }
            out.push(']');
        }
        Value::Object(members) => {
            out.push('{');
            for (i, (name, child)) in members.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                escape_json_into(name, out);
                out.push(':');
                write_element(child, out);
            }
            out.push('}');
        }
    }
}

/// Serialize a semantic tree back to compact JSON text.
///
/// Descriptions (XML attributes) are not representable in JSON and must be
/// empty throughout the tree.
pub fn to_json_string(e: &Element) -> String {
    let mut out = String::new();
    write_element(e, &mut out);
    out
}

/// Structural equality with relative tolerance on numbers.
pub fn structurally_equal(a: &Element, b: &Element, num_rel_tol: f64) -> bool {
    if a.description != b.description {
        return false;
    }
    match (&a.value, &b.value) {
        (Value::Number(x), Value::Number(y)) => {
            let scale = x.abs().max(y.abs()).max(1.0);
            (x - y).abs() <= num_rel_tol * scale
        }
        (Value::Text(x), Value::Text(y)) => x == y,
        (Value::Boolean(x), Value::Boolean(y)) => x == y,
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len()
                && xs.iter().zip(ys).all(|(x, y)| structurally_equal(x, y, num_rel_tol))
        }
        (Value::Object(xs), Value::Object(ys)) => {
            xs.len() == ys.len()
                && xs.iter().zip(ys).all(|((nx, x), (ny, y))| {
                    nx == ny && structurally_equal(x, y, num_rel_tol)
                })
        }
        _ => false,
    }
}

/// The train-journey example document used across the test suite.
#[doc(hidden)]
pub fn train_journey() -> Element {
    parse_json(
        r#"{
            "time": "12:43",
            "stops": [ "Manchester", "Preston", "Glasgow" ],
            "train": { "carriages": 6, "shop": false }
        }"#,
    )
    .unwrap()
}
