//! Reduced-XML parsing and the XML-specific embedders.
//!
//! The reduced format keeps tags, attributes, and text content. Headers,
//! comments, CDATA sections, and processing instructions are skipped; entity
//! references are rejected. Each tag maps into the semantic-tree model as an
//! object-like container wrapped with the tag name, with the attributes
//! carried in the element's description; a tag whose content is text maps to
//! a text element directly.

use crate::autodiff::NodeId;
use crate::embedders::{lstm_cell, lstm_nodes, EmbedCtx, Latent};
use crate::params::GroupId;
use crate::stree::Element;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum XmlError {
    #[error("xml syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unsupported xml at byte {position}: {what}")]
    Unsupported { position: usize, what: String },
}

type Result<T> = std::result::Result<T, XmlError>;

struct XmlParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn is_name_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_' || b == b':'
}

fn is_name_char(b: u8) -> bool {
    is_name_start(b) || b.is_ascii_digit() || b == b'-' || b == b'.'
}

impl<'a> XmlParser<'a> {
    fn syntax<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(XmlError::Syntax { position: self.pos, message: message.into() })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn starts_with(&self, s: &str) -> bool {
        self.bytes[self.pos..].starts_with(s.as_bytes())
    }

    fn skip_until(&mut self, end: &str, what: &str) -> Result<()> {
        match self.bytes[self.pos..]
            .windows(end.len())
            .position(|w| w == end.as_bytes())
        {
            Some(i) => {
                self.pos += i + end.len();
                Ok(())
            }
            None => self.syntax(format!("unterminated {what}")),
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ') | Some(b'\t') | Some(b'\n') | Some(b'\r')) {
            self.pos += 1;
        }
    }

    fn parse_name(&mut self) -> Result<String> {
        let start = self.pos;
        if !self.peek().map_or(false, is_name_start) {
            return self.syntax("expected a tag or attribute name");
        }
        while self.peek().map_or(false, is_name_char) {
            self.pos += 1;
        }
        Ok(std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| XmlError::Syntax { position: start, message: "invalid UTF-8 in name".into() })?
            .to_string())
    }

    fn parse_attributes(&mut self) -> Result<(Vec<(String, String)>, bool)> {
        let mut attrs = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'>') => {
                    self.pos += 1;
                    return Ok((attrs, false));
                }
                Some(b'/') => {
                    self.pos += 1;
                    if self.peek() == Some(b'>') {
                        self.pos += 1;
                        return Ok((attrs, true));
                    }
                    return self.syntax("expected '>' after '/'");
                }
                Some(b) if is_name_start(b) => {
                    let id = self.parse_name()?;
                    self.skip_ws();
                    if self.peek() != Some(b'=') {
                        return self.syntax("expected '=' after attribute name");
                    }
                    self.pos += 1;
                    self.skip_ws();
                    if self.peek() != Some(b'"') {
                        return self.syntax("expected '\"' opening an attribute value");
                    }
                    self.pos += 1;
                    let start = self.pos;
                    loop {
                        match self.peek() {
                            Some(b'"') => break,
                            Some(b'&') => {
                                return Err(XmlError::Unsupported {
                                    position: self.pos,
                                    what: "entity reference".into(),
                                })
                            }
                            Some(b'<') => return self.syntax("'<' inside an attribute value"),
                            Some(_) => self.pos += 1,
                            None => return self.syntax("unterminated attribute value"),
                        }
                    }
                    let value = std::str::from_utf8(&self.bytes[start..self.pos])
                        .map_err(|_| XmlError::Syntax {
                            position: start,
                            message: "invalid UTF-8 in attribute value".into(),
                        })?
                        .to_string();
                    self.pos += 1; // closing quote
                    attrs.push((id, value));
                }
                _ => return self.syntax("expected an attribute, '>' or '/>'"),
            }
        }
    }
}

struct Frame {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<(String, Element)>,
    text: String,
    open_pos: usize,
}

fn finish_frame(frame: Frame, parser: &XmlParser<'_>) -> Result<(String, Element)> {
    let has_text = !frame.text.trim().is_empty();
    let mut element = if !frame.children.is_empty() {
        if has_text {
            return Err(XmlError::Syntax {
                position: frame.open_pos,
                message: format!("mixed text and tag content in <{}>", frame.name),
            });
        }
        Element::object(frame.children)
    } else if has_text {
        Element::text(frame.text)
    } else {
        let _ = parser;
        Element::object(Vec::new())
    };
    element.description = frame.attrs;
    Ok((frame.name, element))
}

/// Parse reduced XML into the semantic-tree model.
///
/// The returned root is an object whose members are the document's top-level
/// tags, so `<a/>` becomes a wrapper "a" around an empty container.
pub fn parse_xml_reduced(text: &str) -> Result<Element> {
    let mut p = XmlParser { bytes: text.as_bytes(), pos: 0 };
    let mut stack: Vec<Frame> = Vec::new();
    let mut top_level: Vec<(String, Element)> = Vec::new();

    loop {
        match p.peek() {
            None => break,
            Some(b'<') => {
                if p.starts_with("<?") {
                    p.pos += 2;
                    p.skip_until("?>", "processing instruction")?;
                } else if p.starts_with("<!--") {
                    p.pos += 4;
                    p.skip_until("-->", "comment")?;
                } else if p.starts_with("<![CDATA[") {
                    p.pos += 9;
                    p.skip_until("]]>", "CDATA section")?;
                } else if p.starts_with("<!") {
                    p.pos += 2;
                    p.skip_until(">", "declaration")?;
                } else if p.starts_with("</") {
                    p.pos += 2;
                    let name = p.parse_name()?;
                    p.skip_ws();
                    if p.peek() != Some(b'>') {
                        return p.syntax("expected '>' closing the end tag");
                    }
                    p.pos += 1;
                    let frame = match stack.pop() {
                        Some(f) => f,
                        None => return p.syntax(format!("stray closing tag </{name}>")),
                    };
                    if frame.name != name {
                        return Err(XmlError::Syntax {
                            position: p.pos,
                            message: format!("mismatched tags: <{}> closed by </{name}>", frame.name),
                        });
                    }
                    let member = finish_frame(frame, &p)?;
                    match stack.last_mut() {
                        Some(parent) => parent.children.push(member),
                        None => top_level.push(member),
                    }
                } else {
                    let open_pos = p.pos;
                    p.pos += 1;
                    let name = p.parse_name()?;
                    let (attrs, self_closing) = p.parse_attributes()?;
                    if self_closing {
                        // empty-tag form is equivalent to <tag></tag>
                        let member = finish_frame(
                            Frame { name, attrs, children: Vec::new(), text: String::new(), open_pos },
                            &p,
                        )?;
                        match stack.last_mut() {
                            Some(parent) => parent.children.push(member),
                            None => top_level.push(member),
                        }
                    } else {
                        stack.push(Frame { name, attrs, children: Vec::new(), text: String::new(), open_pos });
                    }
                }
            }
            Some(b'&') => {
                return Err(XmlError::Unsupported { position: p.pos, what: "entity reference".into() })
            }
            Some(_) => {
                let start = p.pos;
                while let Some(b) = p.peek() {
                    if b == b'<' || b == b'&' {
                        break;
                    }
                    p.pos += 1;
                }
                let chunk = std::str::from_utf8(&p.bytes[start..p.pos]).map_err(|_| {
                    XmlError::Syntax { position: start, message: "invalid UTF-8 text".into() }
                })?;
                match stack.last_mut() {
                    Some(frame) => frame.text.push_str(chunk),
                    None => {
                        if !chunk.trim().is_empty() {
                            return Err(XmlError::Syntax {
                                position: start,
                                message: "text content outside any tag".into(),
                            });
                        }
                    }
                }
            }
        }
    }
    if let Some(frame) = stack.pop() {
        return Err(XmlError::Syntax {
            position: frame.open_pos,
            message: format!("unclosed tag <{}>", frame.name),
        });
    }
    Ok(Element::object(top_level))
}

// ---------------------------------------------------------------------------
// XML embedders
// ---------------------------------------------------------------------------

/// Attribute-value embedder: per-attribute-id character LSTM, output the mean
/// of the hidden states. The empty value embeds to the zero vector.
///
/// The group is keyed by attribute id alone and carries both the LSTM slots
/// and the per-id character rows.
pub fn embed_attribute(
    ctx: &mut EmbedCtx<'_>,
    attr_group: GroupId,
    value: &str,
) -> std::result::Result<NodeId, crate::autodiff::AutodiffError> {
    let p = lstm_nodes(ctx, attr_group);
    let m = ctx.tape.value(p.bias(0)).rows();
    if value.is_empty() {
        return Ok(ctx.tape.zeros(m));
    }
    let mut h = ctx.tape.zeros(m);
    let mut c = ctx.tape.zeros(m);
    let mut hs = Vec::new();
    for ch in value.chars() {
        let slot = ctx
            .store
            .group(attr_group)
            .char_slot(ch)
            .or_else(|| ctx.store.unk_slot(attr_group))
            .expect("attribute groups carry an unk character row");
        let x = ctx.param(attr_group, slot);
        let (h2, c2) = lstm_cell(ctx.tape, &p, x, h, c)?;
        h = h2;
        c = c2;
        hs.push(h);
    }
    ctx.tape.mean(&hs)
}

/// Tag embedder: per-path LSTM over the child latents plus the sum of the
/// attribute embeddings. With no children and no attributes this is the zero
/// vector.
pub fn embed_tag_resolved(
    ctx: &mut EmbedCtx<'_>,
    tag_group: GroupId,
    children_h: &[NodeId],
    attrs: &[(GroupId, &str)],
) -> std::result::Result<Latent, crate::autodiff::AutodiffError> {
    let p = lstm_nodes(ctx, tag_group);
    let m = ctx.tape.value(p.bias(0)).rows();
    let mut h = ctx.tape.zeros(m);
    let mut c = ctx.tape.zeros(m);
    for &x in children_h {
        let (h2, c2) = lstm_cell(ctx.tape, &p, x, h, c)?;
        h = h2;
        c = c2;
    }
    let mut out = h;
    for (group, value) in attrs {
        let a = embed_attribute(ctx, *group, value)?;
        out = ctx.tape.add(out, a)?;
    }
    let zero = ctx.tape.zeros(m);
    Ok(Latent { c: zero, h: out })
}
