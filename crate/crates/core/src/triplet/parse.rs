use std::collections::HashSet;

use thiserror::Error;

use super::{
    Entity, EntityType, EventState, EventStateTag, JudgmentReply, PairTag, PairTagList, Separator, SnippetTriplet,
    TaggedList, TaggedTriplet, TemporalTag, Term, Triplet, TripletList, Verdict,
};

/// Nesting cap used by the free parsing functions.
pub const DEFAULT_MAX_DEPTH: usize = 5;

const NONE_MARKER: &str = "<none>";

/// Errors carry byte offsets into the parsed text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty input")]
    EmptyInput,
    #[error("unknown tag <{0}>")]
    UnknownTag(String),
    #[error("duplicate entity name {0:?}")]
    DuplicateName(String),
    #[error("malformed entity segment at offset {0}")]
    MalformedSegment(usize),
    #[error("unbalanced parentheses starting at offset {0}")]
    UnbalancedParens(usize),
    #[error("empty field at offset {0}")]
    EmptyField(usize),
    #[error("<none> used as subject at offset {0}")]
    NoneInSubject(usize),
    #[error("nested triplet used as subject at offset {0}")]
    NestedSubject(usize),
    #[error("triplet nesting exceeds depth {0}")]
    DepthExceeded(usize),
    #[error("expected {expected} at offset {offset}")]
    Expected { expected: &'static str, offset: usize },
    #[error("unterminated snippet starting at offset {0}")]
    UnterminatedSnippet(usize),
    #[error("missing angle-bracket tag at offset {0}")]
    MissingTag(usize),
    #[error("missing backtick time field at offset {0}")]
    MissingTimeField(usize),
    #[error("missing `->` at offset {0}")]
    MissingArrow(usize),
    #[error("pair holds {0} triplets, expected 2")]
    PairArityError(usize),
    #[error("unrecognized verdict {0:?}")]
    UnrecognizedVerdict(String),
    #[error("unexpected trailing input at offset {0}")]
    TrailingInput(usize),
}

/// Strict parser for the reply grammar. The free functions in this module use
/// [`Parser::default`].
#[derive(Debug, Clone, Copy)]
pub struct Parser {
    pub max_depth: usize,
}

impl Default for Parser {
    fn default() -> Self {
        Parser {
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Cursor { src, pos: 0 }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8, expected: &'static str) -> Result<(), ParseError> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(ParseError::Expected {
                expected,
                offset: self.pos,
            })
        }
    }

    /// Reads bytes until one of `stops` (or a structural byte) and returns the
    /// raw slice. Structural ASCII bytes never occur inside multi-byte UTF-8
    /// sequences, so byte scanning is safe.
    fn take_until(&mut self, stops: &[u8]) -> &'a str {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() {
            let b = bytes[self.pos];
            if stops.contains(&b) || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn finish(&mut self) -> Result<(), ParseError> {
        self.skip_ws();
        if self.at_end() {
            Ok(())
        } else {
            Err(ParseError::TrailingInput(self.pos))
        }
    }
}

impl Parser {
    pub fn new(max_depth: usize) -> Self {
        Parser { max_depth }
    }

    pub fn triplet(&self, text: &str) -> Result<Triplet, ParseError> {
        let mut cur = Cursor::new(text);
        cur.skip_ws();
        if cur.at_end() {
            return Err(ParseError::EmptyInput);
        }
        let t = self.triplet_at(&mut cur, 1)?;
        cur.finish()?;
        Ok(t)
    }

    fn triplet_at(&self, cur: &mut Cursor<'_>, depth: usize) -> Result<Triplet, ParseError> {
        let open = cur.pos;
        cur.expect(b'(', "'('")?;
        if depth > self.max_depth {
            return Err(ParseError::DepthExceeded(self.max_depth));
        }

        cur.skip_ws();
        if cur.peek() == Some(b'(') {
            return Err(ParseError::NestedSubject(cur.pos));
        }
        let subject_at = cur.pos;
        let subject = cur.take_until(b",").trim();
        self.field_end(cur, open, b',', "','")?;
        if subject.is_empty() {
            return Err(ParseError::EmptyField(subject_at));
        }
        if subject == NONE_MARKER {
            return Err(ParseError::NoneInSubject(subject_at));
        }

        cur.skip_ws();
        let relation_at = cur.pos;
        let relation = cur.take_until(b",").trim();
        self.field_end(cur, open, b',', "','")?;
        if relation.is_empty() {
            return Err(ParseError::EmptyField(relation_at));
        }

        cur.skip_ws();
        let object = if cur.peek() == Some(b'(') {
            Term::Nested(Box::new(self.triplet_at(cur, depth + 1)?))
        } else {
            let object_at = cur.pos;
            let raw = cur.take_until(b",").trim();
            if raw.is_empty() {
                return Err(ParseError::EmptyField(object_at));
            }
            if raw == NONE_MARKER {
                Term::None
            } else {
                Term::Entity(raw.to_string())
            }
        };

        cur.skip_ws();
        if cur.at_end() {
            return Err(ParseError::UnbalancedParens(open));
        }
        cur.expect(b')', "')'")?;
        Ok(Triplet {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object,
        })
    }

    fn field_end(&self, cur: &mut Cursor<'_>, open: usize, sep: u8, expected: &'static str) -> Result<(), ParseError> {
        if cur.at_end() {
            return Err(ParseError::UnbalancedParens(open));
        }
        cur.expect(sep, expected)
    }

    /// Parses `[item sep item ...]`, tracking the first separator seen.
    fn list<T>(
        &self,
        text: &str,
        mut item: impl FnMut(&Self, &mut Cursor<'_>) -> Result<T, ParseError>,
    ) -> Result<(Vec<T>, Separator), ParseError> {
        let mut cur = Cursor::new(text);
        cur.skip_ws();
        if cur.at_end() {
            return Err(ParseError::EmptyInput);
        }
        cur.expect(b'[', "'['")?;
        let mut items = Vec::new();
        let mut separator = None;
        loop {
            cur.skip_ws();
            if cur.eat(b']') {
                break;
            }
            if cur.at_end() {
                return Err(ParseError::Expected {
                    expected: "']'",
                    offset: cur.pos,
                });
            }
            items.push(item(self, &mut cur)?);
            cur.skip_ws();
            match cur.peek() {
                Some(b']') => {
                    cur.pos += 1;
                    break;
                }
                Some(b @ (b';' | b',')) => {
                    cur.pos += 1;
                    separator.get_or_insert(if b == b';' {
                        Separator::Semicolon
                    } else {
                        Separator::Comma
                    });
                }
                None => {
                    return Err(ParseError::Expected {
                        expected: "']'",
                        offset: cur.pos,
                    })
                }
                _ => {
                    return Err(ParseError::Expected {
                        expected: "';', ',' or ']'",
                        offset: cur.pos,
                    })
                }
            }
        }
        cur.finish()?;
        Ok((items, separator.unwrap_or_default()))
    }

    pub fn triplet_list(&self, text: &str) -> Result<TripletList, ParseError> {
        let (items, separator) = self.list(text, |p, cur| {
            let triplet = p.triplet_at(cur, 1)?;
            cur.skip_ws();
            let snippet = if cur.peek() == Some(b'`') {
                Some(backtick_field(cur)?.to_string())
            } else {
                None
            };
            Ok(SnippetTriplet { triplet, snippet })
        })?;
        Ok(TripletList { items, separator })
    }

    pub fn tagged_list(&self, text: &str) -> Result<TaggedList, ParseError> {
        let (items, separator) = self.list(text, |p, cur| {
            let triplet = p.triplet_at(cur, 1)?;
            cur.skip_ws();
            let kind = match angle_tag(cur)?.as_str() {
                "event" => EventState::Event,
                "state" => EventState::State,
                other => return Err(ParseError::UnknownTag(other.to_string())),
            };
            cur.skip_ws();
            if cur.peek() != Some(b'`') {
                return Err(ParseError::MissingTimeField(cur.pos));
            }
            let raw = backtick_field(cur)?.trim();
            let time_ref = if raw.eq_ignore_ascii_case("none") || raw.is_empty() {
                None
            } else {
                Some(raw.to_string())
            };
            Ok(TaggedTriplet {
                triplet,
                tag: EventStateTag { kind, time_ref },
            })
        })?;
        Ok(TaggedList { items, separator })
    }

    pub fn pair_tags(&self, text: &str) -> Result<PairTagList, ParseError> {
        let (items, separator) = self.list(text, |p, cur| {
            cur.expect(b'(', "'('")?;
            let mut members = Vec::new();
            loop {
                cur.skip_ws();
                match cur.peek() {
                    Some(b'(') => members.push(p.triplet_at(cur, 1)?),
                    Some(b')') => {
                        cur.pos += 1;
                        break;
                    }
                    None => return Err(ParseError::UnbalancedParens(cur.pos)),
                    _ => return Err(ParseError::PairArityError(members.len())),
                }
                cur.skip_ws();
                if !(cur.eat(b',') || cur.eat(b';')) {
                    cur.skip_ws();
                    if cur.eat(b')') {
                        break;
                    }
                    return Err(ParseError::Expected {
                        expected: "',' or ')'",
                        offset: cur.pos,
                    });
                }
            }
            if members.len() != 2 {
                return Err(ParseError::PairArityError(members.len()));
            }
            cur.skip_ws();
            if !cur.src[cur.pos..].starts_with("->") {
                return Err(ParseError::MissingArrow(cur.pos));
            }
            cur.pos += 2;
            cur.skip_ws();
            let raw = angle_tag(cur)?;
            let tag = raw.parse::<TemporalTag>().map_err(ParseError::UnknownTag)?;
            let second = members.pop().unwrap();
            let first = members.pop().unwrap();
            Ok(PairTag { first, second, tag })
        })?;
        Ok(PairTagList { items, separator })
    }

    pub fn correction(&self, text: &str) -> Result<Option<Triplet>, ParseError> {
        let trimmed = text.trim();
        if trimmed.eq_ignore_ascii_case("none") {
            return Ok(None);
        }
        self.triplet(trimmed).map(Some)
    }
}

fn backtick_field<'a>(cur: &mut Cursor<'a>) -> Result<&'a str, ParseError> {
    let open = cur.pos;
    cur.expect(b'`', "'`'")?;
    let rest = &cur.src[cur.pos..];
    match rest.find('`') {
        Some(end) => {
            let field = &rest[..end];
            cur.pos += end + 1;
            Ok(field)
        }
        None => Err(ParseError::UnterminatedSnippet(open)),
    }
}

fn angle_tag(cur: &mut Cursor<'_>) -> Result<String, ParseError> {
    let at = cur.pos;
    if !cur.eat(b'<') {
        return Err(ParseError::MissingTag(at));
    }
    let rest = &cur.src[cur.pos..];
    match rest.find('>') {
        Some(end) => {
            let tag = rest[..end].trim().to_ascii_lowercase();
            cur.pos += end + 1;
            Ok(tag)
        }
        None => Err(ParseError::MissingTag(at)),
    }
}

/// Parses `name <tag>; name <tag>; ...`.
pub fn parse_entity_list(text: &str) -> Result<Vec<Entity>, ParseError> {
    let entities = entity_segments(text)?;
    let mut seen = HashSet::new();
    for e in &entities {
        if !seen.insert(e.name.as_str()) {
            return Err(ParseError::DuplicateName(e.name.clone()));
        }
    }
    Ok(entities)
}

/// Like [`parse_entity_list`], but the second and later occurrences of a name
/// are renamed `name (2)`, `name (3)`, ... The renamed names are returned
/// alongside.
pub fn parse_entity_list_renaming(text: &str) -> Result<(Vec<Entity>, Vec<String>), ParseError> {
    let mut entities = entity_segments(text)?;
    let mut seen: HashSet<String> = HashSet::new();
    let mut renamed = Vec::new();
    for e in entities.iter_mut() {
        if seen.contains(&e.name) {
            let mut n = 2;
            while seen.contains(&format!("{} ({n})", e.name)) {
                n += 1;
            }
            e.name = format!("{} ({n})", e.name);
            renamed.push(e.name.clone());
        }
        seen.insert(e.name.clone());
    }
    Ok((entities, renamed))
}

fn entity_segments(text: &str) -> Result<Vec<Entity>, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for segment in text.split(';') {
        let at = offset;
        offset += segment.len() + 1;
        let seg = segment.trim();
        if seg.is_empty() {
            continue;
        }
        let seg = seg.trim_end_matches('.');
        if !seg.ends_with('>') {
            return Err(ParseError::MalformedSegment(at));
        }
        let open = seg.rfind('<').ok_or(ParseError::MalformedSegment(at))?;
        let name = seg[..open].trim();
        if name.is_empty() {
            return Err(ParseError::MalformedSegment(at));
        }
        let tag = seg[open + 1..seg.len() - 1].trim();
        let etype = tag.parse::<EntityType>().map_err(ParseError::UnknownTag)?;
        out.push(Entity::new(name, etype));
    }
    if out.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    Ok(out)
}

pub fn parse_triplet(text: &str) -> Result<Triplet, ParseError> {
    Parser::default().triplet(text)
}

pub fn parse_triplet_list(text: &str) -> Result<TripletList, ParseError> {
    Parser::default().triplet_list(text)
}

pub fn parse_tagged_list(text: &str) -> Result<TaggedList, ParseError> {
    Parser::default().tagged_list(text)
}

pub fn parse_pair_tags(text: &str) -> Result<PairTagList, ParseError> {
    Parser::default().pair_tags(text)
}

/// Returns `None` for a literal `none` reply, otherwise the corrected triplet.
pub fn parse_correction(text: &str) -> Result<Option<Triplet>, ParseError> {
    Parser::default().correction(text)
}

/// Parses `yes` or `no; explanation`. The first word decides the verdict,
/// case-insensitively; text after the first `;` (or after the verdict word
/// when no `;` is present) becomes the explanation of a `no`.
pub fn parse_judgment(text: &str) -> Result<JudgmentReply, ParseError> {
    let trimmed = text.trim();
    let word_end = trimmed.find(|c: char| !c.is_alphabetic()).unwrap_or(trimmed.len());
    let word = &trimmed[..word_end];
    let verdict = if word.eq_ignore_ascii_case("yes") {
        Verdict::Yes
    } else if word.eq_ignore_ascii_case("no") {
        Verdict::No
    } else {
        return Err(ParseError::UnrecognizedVerdict(trimmed.to_string()));
    };
    let explanation = match verdict {
        Verdict::Yes => None,
        Verdict::No => {
            let rest = &trimmed[word_end..];
            let rest = rest.trim_start().trim_start_matches([';', ',', ':', '.', '-']).trim();
            (!rest.is_empty()).then(|| rest.to_string())
        }
    };
    Ok(JudgmentReply { verdict, explanation })
}

/// Cuts prose surrounding the first structural block of a reply.
///
/// Returns the structural slice (from the first `[` or `(` to the matching
/// last `]` or `)`) and whether anything non-blank was dropped.
pub fn isolate_structure(text: &str) -> (&str, bool) {
    let Some(start) = text.find(['[', '(']) else {
        return (text, false);
    };
    let close = if text.as_bytes()[start] == b'[' { ']' } else { ')' };
    let end = text.rfind(close).map(|i| i + 1).unwrap_or(text.len());
    let end = end.max(start + 1);
    let dropped = !text[..start].trim().is_empty() || !text[end..].trim().is_empty();
    (&text[start..end], dropped)
}
