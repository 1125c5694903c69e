//! Variable-free functional programs as ordered trees.
//!
//! Grammar (whitespace-tokenized after normalization):
//!
//! ```text
//! expr := SYMBOL+
//!       | SYMBOL+ "(" expr ("," expr)* ")"
//! ```
//!
//! A run of several symbols between delimiters becomes a parent-child chain
//! (`playing with` parses to `playing -> with`), and an argument list hangs off
//! the last symbol of the run. Every tree carries a virtual `<root>` node whose
//! single child is the outermost expression.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ParseError;

/// Symbol of the virtual root node.
pub const ROOT_SYMBOL: &str = "<root>";

/// Index of a node inside a [`ProgramTree`].
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub symbol: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Attached to the parent by juxtaposition (`a b`) rather than as a
    /// parenthesized argument. Only affects serialization.
    pub chained: bool,
}

/// Ordered rooted tree of program symbols. Node 0 is always the virtual root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramTree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Symbol(String),
    Open,
    Close,
    Comma,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Symbol(s) => format!("symbol `{s}`"),
            Token::Open => "`(`".into(),
            Token::Close => "`)`".into(),
            Token::Comma => "`,`".into(),
        }
    }
}

/// Splits program text into tokens. `(`, `)` and `,` are delimiters whether or
/// not they are surrounded by whitespace; quoted literals (`'new york'`) stay
/// one token.
fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();

    let flush = |current: &mut String, tokens: &mut Vec<Token>| {
        if !current.is_empty() {
            tokens.push(Token::Symbol(std::mem::take(current)));
        }
    };

    while let Some(c) = chars.next() {
        match c {
            '(' | ')' | ',' => {
                flush(&mut current, &mut tokens);
                tokens.push(match c {
                    '(' => Token::Open,
                    ')' => Token::Close,
                    _ => Token::Comma,
                });
            }
            '\'' | '"' if current.is_empty() => {
                let mut literal = String::from(c);
                let mut closed = false;
                for next in chars.by_ref() {
                    literal.push(next);
                    if next == c {
                        closed = true;
                        break;
                    }
                }
                if !closed {
                    return Err(ParseError::new(tokens.len(), "closing quote"));
                }
                tokens.push(Token::Symbol(literal));
            }
            c if c.is_whitespace() => flush(&mut current, &mut tokens),
            c => current.push(c),
        }
    }
    flush(&mut current, &mut tokens);
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    nodes: Vec<Node>,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn error(&self, expected: &'static str) -> ParseError {
        let mut err = ParseError::new(self.pos, expected);
        err.found = self.peek().map(Token::describe);
        err
    }

    fn push_node(&mut self, symbol: String, parent: NodeId, chained: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            symbol,
            parent: Some(parent),
            children: Vec::new(),
            chained,
        });
        self.nodes[parent].children.push(id);
        id
    }

    fn expr(&mut self, parent: NodeId) -> Result<NodeId, ParseError> {
        let first = match self.peek() {
            Some(Token::Symbol(s)) => s.clone(),
            _ => return Err(self.error("symbol")),
        };
        self.pos += 1;
        let top = self.push_node(first, parent, false);
        let mut last = top;
        while let Some(Token::Symbol(s)) = self.peek() {
            let s = s.clone();
            self.pos += 1;
            last = self.push_node(s, last, true);
        }
        if let Some(Token::Open) = self.peek() {
            self.pos += 1;
            loop {
                self.expr(last)?;
                match self.peek() {
                    Some(Token::Comma) => self.pos += 1,
                    Some(Token::Close) => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.error("`,` or `)`")),
                }
            }
        }
        Ok(top)
    }
}

impl ProgramTree {
    /// Parses program text into a tree under a virtual `<root>`.
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let tokens = tokenize(text)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            nodes: vec![Node {
                symbol: ROOT_SYMBOL.to_string(),
                parent: None,
                children: Vec::new(),
                chained: false,
            }],
        };
        parser.expr(0)?;
        if parser.pos != parser.tokens.len() {
            return Err(parser.error("end of input"));
        }
        Ok(ProgramTree {
            nodes: parser.nodes,
        })
    }

    pub const fn root(&self) -> NodeId {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// A tree always holds at least the root and one symbol.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn symbol(&self, id: NodeId) -> &str {
        &self.nodes[id].symbol
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    /// Distance from the virtual root.
    pub fn depth(&self, mut id: NodeId) -> usize {
        let mut depth = 0;
        while let Some(p) = self.nodes[id].parent {
            depth += 1;
            id = p;
        }
        depth
    }

    /// Renders the program with single-space token separation.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        // The root has exactly one child by construction.
        if let Some(&top) = self.nodes[0].children.first() {
            self.write_subtree(top, &mut out);
        }
        out
    }

    /// Renders the subtree rooted at `id` as program text.
    pub fn serialize_subtree(&self, id: NodeId) -> String {
        let mut out = String::new();
        self.write_subtree(id, &mut out);
        out
    }

    fn write_subtree(&self, id: NodeId, out: &mut String) {
        let node = &self.nodes[id];
        out.push_str(&node.symbol);
        match node.children.as_slice() {
            [] => {}
            [only] if self.nodes[*only].chained => {
                out.push(' ');
                self.write_subtree(*only, out);
            }
            children => {
                out.push_str(" ( ");
                for (i, &c) in children.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" , ");
                    }
                    self.write_subtree(c, out);
                }
                out.push_str(" )");
            }
        }
    }

    /// Replaces lexicon members and literal values with their category
    /// constants. Multi-word members collapse a chain into a single node.
    pub fn anonymize(&self, lexicon: &AnonymizationLexicon) -> ProgramTree {
        let mut nodes = vec![Node {
            symbol: ROOT_SYMBOL.to_string(),
            parent: None,
            children: Vec::new(),
            chained: false,
        }];
        for &c in &self.nodes[0].children {
            self.anonymize_into(c, 0, self.nodes[c].chained, lexicon, &mut nodes);
        }
        ProgramTree { nodes }
    }

    fn anonymize_into(
        &self,
        id: NodeId,
        parent: NodeId,
        chained: bool,
        lexicon: &AnonymizationLexicon,
        out: &mut Vec<Node>,
    ) {
        let (symbol, last) = match lexicon.match_at(self, id) {
            Some((constant, last)) => (constant.to_string(), last),
            None => (self.nodes[id].symbol.clone(), id),
        };
        let new_id = out.len();
        out.push(Node {
            symbol,
            parent: Some(parent),
            children: Vec::new(),
            chained,
        });
        out[parent].children.push(new_id);
        for &c in &self.nodes[last].children {
            self.anonymize_into(c, new_id, self.nodes[c].chained, lexicon, out);
        }
    }
}

impl fmt::Display for ProgramTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Whitespace-normalized program text. Does not validate on construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Program(pub String);

impl Program {
    pub fn new(text: impl Into<String>) -> Self {
        Program(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(&self) -> Result<ProgramTree, ParseError> {
        ProgramTree::parse(&self.0)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One anonymization category: member words or phrases and their constant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconCategory {
    pub constant: String,
    #[serde(default)]
    pub members: Vec<String>,
}

/// Replacement rule for quoted literals and numerals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValuePattern {
    #[serde(default = "ValuePattern::default_constant")]
    pub constant: String,
    #[serde(default = "crate::util::default_true")]
    pub quoted: bool,
    #[serde(default = "crate::util::default_true")]
    pub numerals: bool,
}

impl ValuePattern {
    fn default_constant() -> String {
        "'value'".to_string()
    }

    fn matches(&self, symbol: &str) -> bool {
        let quoted = symbol.len() >= 2
            && ((symbol.starts_with('\'') && symbol.ends_with('\''))
                || (symbol.starts_with('"') && symbol.ends_with('"')));
        (self.quoted && quoted) || (self.numerals && symbol.parse::<f64>().is_ok())
    }
}

impl Default for ValuePattern {
    fn default() -> Self {
        ValuePattern {
            constant: Self::default_constant(),
            quoted: true,
            numerals: true,
        }
    }
}

/// Per-dataset anonymization configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnonymizationLexicon {
    #[serde(default)]
    pub categories: BTreeMap<String, LexiconCategory>,
    #[serde(default)]
    pub value_pattern: Option<ValuePattern>,
}

impl AnonymizationLexicon {
    /// Lexicon that leaves every program unchanged.
    pub fn identity() -> Self {
        Self::default()
    }

    /// Categories used for the COVR-style visual reasoning language.
    pub fn covr() -> Self {
        let cat = |constant: &str, members: &[&str]| LexiconCategory {
            constant: constant.to_string(),
            members: members.iter().map(|s| s.to_string()).collect(),
        };
        let mut categories = BTreeMap::new();
        categories.insert(
            "entity".to_string(),
            cat(
                "ANON_ENTITY",
                &["dog", "cat", "mouse", "animal", "elephant", "bird"],
            ),
        );
        categories.insert(
            "type_value".to_string(),
            cat(
                "ANON_TYPE_VALUE",
                &[
                    "black", "white", "brown", "gray", "round", "square", "triangle",
                ],
            ),
        );
        categories.insert(
            "relation".to_string(),
            cat("ANON_RELATION", &["playing with", "looking at", "chasing"]),
        );
        AnonymizationLexicon {
            categories,
            value_pattern: Some(ValuePattern::default()),
        }
    }

    /// Checks that no constant can itself be matched by a member or the
    /// value pattern, which would break idempotence.
    pub fn validate(&self) -> Result<(), String> {
        for (name, category) in &self.categories {
            if category.constant.split_whitespace().count() != 1 {
                return Err(format!("category `{name}`: constant must be one token"));
            }
            for other in self.categories.values() {
                for member in &other.members {
                    if member.split_whitespace().any(|w| w == category.constant) {
                        return Err(format!(
                            "category `{name}`: constant `{}` appears in member `{member}`",
                            category.constant
                        ));
                    }
                }
            }
            if let Some(vp) = &self.value_pattern {
                if vp.matches(&category.constant) && vp.constant != category.constant {
                    return Err(format!(
                        "category `{name}`: constant matches the value pattern"
                    ));
                }
            }
            if category.members.iter().any(|m| m.split_whitespace().next().is_none()) {
                return Err(format!("category `{name}`: empty member"));
            }
        }
        Ok(())
    }

    /// Longest lexicon match starting at `id`, following chained children.
    /// Returns the constant and the last node of the matched chain.
    fn match_at<'a>(&'a self, tree: &ProgramTree, id: NodeId) -> Option<(&'a str, NodeId)> {
        let mut best: Option<(&str, NodeId, usize)> = None;
        for category in self.categories.values() {
            for member in &category.members {
                if let Some(last) = match_phrase(tree, id, member) {
                    let len = member.split_whitespace().count();
                    if best.is_none_or(|(_, _, l)| len > l) {
                        best = Some((&category.constant, last, len));
                    }
                }
            }
        }
        if let Some((constant, last, _)) = best {
            return Some((constant, last));
        }
        let vp = self.value_pattern.as_ref()?;
        vp.matches(tree.symbol(id)).then_some((vp.constant.as_str(), id))
    }
}

fn match_phrase(tree: &ProgramTree, start: NodeId, phrase: &str) -> Option<NodeId> {
    let mut words = phrase.split_whitespace();
    let mut current = start;
    if tree.symbol(current) != words.next()? {
        return None;
    }
    for word in words {
        match tree.children(current) {
            [only] if tree.node(*only).chained && tree.symbol(*only) == word => current = *only,
            _ => return None,
        }
    }
    Some(current)
}

/// Number of symbol tokens in program text (after normalization).
pub fn symbol_token_count(text: &str) -> Result<usize, ParseError> {
    Ok(tokenize(text)?
        .iter()
        .filter(|t| matches!(t, Token::Symbol(_)))
        .count())
}
