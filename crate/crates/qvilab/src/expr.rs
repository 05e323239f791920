//! Scalar expressions for problem coefficients.
//!
//! Drift, volatility, driver, terminal reward, impulse map and intervention
//! cost are all written as strings in the config file and parsed into small
//! ASTs. The variable set is context dependent: coefficients see `(t, x1..xn)`,
//! drivers additionally see `(y, z1..zd)` and may reference the candidate
//! value function through `V(e1, ..., en)`, impulse maps and costs see the
//! action coordinates `b1..bm`, and the terminal reward sees the state only.
//!
//! Operators are `+ - * / ^` with the usual precedence, `^` binds tighter
//! than unary minus and associates to the right (`2^3^2 = 512`). Functions:
//! `exp, log, sqrt, abs, min, max, pow`. Evaluation is pure: same inputs,
//! same output, no interior mutability, so expressions can be shared across
//! threads freely.

use std::fmt;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ParseError {
    #[error("unexpected character '{ch}' at byte {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("malformed number literal at byte {pos}")]
    BadNumber { pos: usize },
    #[error("unexpected token '{token}' at byte {pos}")]
    UnexpectedToken { token: String, pos: usize },
    #[error("unexpected end of input (expected {expected})")]
    UnexpectedEnd { expected: String },
    #[error("unknown identifier '{name}' at byte {pos}: allowed variables here are {allowed}")]
    UnknownIdentifier {
        name: String,
        pos: usize,
        allowed: String,
    },
    #[error("'{name}' expects {expected} argument(s), got {got} (at byte {pos})")]
    WrongArity {
        name: String,
        expected: usize,
        got: usize,
        pos: usize,
    },
    #[error("value term V(...) is not allowed in this context (at byte {pos})")]
    ValueTermForbidden { pos: usize },
    #[error("trailing input starting at byte {pos}: '{rest}'")]
    TrailingInput { pos: usize, rest: String },
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero in '{0}'")]
    DivisionByZero(String),
    #[error("negative argument to '{func}' in '{expr}' (got {value})")]
    DomainError {
        func: &'static str,
        expr: String,
        value: f64,
    },
    #[error("non-finite result in '{0}'")]
    NonFinite(String),
    #[error("variable '{name}' has no binding in this evaluation (needed by '{expr}')")]
    MissingBinding { name: String, expr: String },
    #[error("value term '{0}' evaluated without a value function")]
    MissingValueFunction(String),
    #[error("value function failed in '{expr}': {message}")]
    ValueFunctionFailed { expr: String, message: String },
}

/// A variable reference. Indices are zero-based internally; the surface
/// syntax is one-based (`x1` is `X(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X(usize),
    Y,
    Z(usize),
    B(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Y => write!(f, "y"),
            Var::Z(i) => write!(f, "z{}", i + 1),
            Var::B(i) => write!(f, "b{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
    Pow,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Exp | Func::Log | Func::Sqrt | Func::Abs => 1,
            Func::Min | Func::Max | Func::Pow => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
    /// `V(e1, ..., en)`: the candidate value function evaluated at the
    /// current time and the state assembled from the argument expressions.
    ValueTerm(Vec<Node>),
}

/// Which variables an expression is allowed to mention, fixed by where in
/// the problem description it appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarSet {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub action_dim: usize,
    pub allow_t: bool,
    pub allow_y: bool,
    pub allow_z: bool,
    pub allow_b: bool,
    pub allow_value_term: bool,
}

impl VarSet {
    /// Drift / volatility entries: functions of `(t, x)`.
    pub fn coefficient(state_dim: usize) -> Self {
        VarSet {
            state_dim,
            noise_dim: 0,
            action_dim: 0,
            allow_t: true,
            allow_y: false,
            allow_z: false,
            allow_b: false,
            allow_value_term: false,
        }
    }

    /// Driver: `(t, x, y, z)` plus value terms.
    pub fn driver(state_dim: usize, noise_dim: usize) -> Self {
        VarSet {
            state_dim,
            noise_dim,
            action_dim: 0,
            allow_t: true,
            allow_y: true,
            allow_z: true,
            allow_b: false,
            allow_value_term: true,
        }
    }

    /// Terminal reward: state only.
    pub fn terminal(state_dim: usize) -> Self {
        VarSet {
            state_dim,
            noise_dim: 0,
            action_dim: 0,
            allow_t: false,
            allow_y: false,
            allow_z: false,
            allow_b: false,
            allow_value_term: false,
        }
    }

    /// Impulse map / intervention cost: `(t, x, b)`.
    pub fn impulse(state_dim: usize, action_dim: usize) -> Self {
        VarSet {
            state_dim,
            noise_dim: 0,
            action_dim,
            allow_t: true,
            allow_y: false,
            allow_z: false,
            allow_b: true,
            allow_value_term: false,
        }
    }

    fn describe(&self) -> String {
        let mut names = Vec::new();
        if self.allow_t {
            names.push("t".to_string());
        }
        match self.state_dim {
            0 => {}
            1 => names.push("x1".to_string()),
            n => names.push(format!("x1..x{n}")),
        }
        if self.allow_y {
            names.push("y".to_string());
        }
        if self.allow_z {
            match self.noise_dim {
                0 => {}
                1 => names.push("z1".to_string()),
                d => names.push(format!("z1..z{d}")),
            }
        }
        if self.allow_b {
            match self.action_dim {
                0 => {}
                1 => names.push("b1".to_string()),
                m => names.push(format!("b1..b{m}")),
            }
        }
        if names.is_empty() {
            "(none)".to_string()
        } else {
            names.join(", ")
        }
    }

    fn resolve(&self, name: &str, pos: usize) -> Result<Var, ParseError> {
        let err = || ParseError::UnknownIdentifier {
            name: name.to_string(),
            pos,
            allowed: self.describe(),
        };
        let indexed = |prefix: &str, max: usize| -> Option<Result<Var, ()>> {
            name.strip_prefix(prefix).map(|digits| {
                match digits.parse::<usize>() {
                    Ok(i) if i >= 1 && i <= max => Ok(match prefix {
                        "x" => Var::X(i - 1),
                        "z" => Var::Z(i - 1),
                        _ => Var::B(i - 1),
                    }),
                    _ => Err(()),
                }
            })
        };
        match name {
            "t" if self.allow_t => return Ok(Var::T),
            "y" if self.allow_y => return Ok(Var::Y),
            _ => {}
        }
        if !name.is_empty() && name.len() > 1 {
            let head = &name[..1];
            let candidate = match head {
                "x" => indexed("x", self.state_dim),
                "z" if self.allow_z => indexed("z", self.noise_dim),
                "b" if self.allow_b => indexed("b", self.action_dim),
                _ => None,
            };
            if let Some(resolved) = candidate {
                return resolved.map_err(|_| err());
            }
        }
        Err(err())
    }
}

/// Bindings supplied at evaluation time. Slots the expression does not use
/// may be left unset; referencing an unset slot is an error that names the
/// offending subexpression.
#[derive(Clone, Copy, Default)]
pub struct EvalContext<'a> {
    pub t: Option<f64>,
    pub state: Option<&'a [f64]>,
    pub y: Option<f64>,
    pub z: Option<&'a [f64]>,
    pub action: Option<&'a [f64]>,
    pub value_fn: Option<&'a (dyn Fn(f64, &[f64]) -> Result<f64, String> + Sync)>,
}

impl<'a> EvalContext<'a> {
    pub fn coefficient(t: f64, state: &'a [f64]) -> Self {
        EvalContext {
            t: Some(t),
            state: Some(state),
            ..Default::default()
        }
    }

    pub fn terminal(state: &'a [f64]) -> Self {
        EvalContext {
            state: Some(state),
            ..Default::default()
        }
    }

    pub fn impulse(t: f64, state: &'a [f64], action: &'a [f64]) -> Self {
        EvalContext {
            t: Some(t),
            state: Some(state),
            action: Some(action),
            ..Default::default()
        }
    }
}

/// A parsed expression together with its variable context.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    vars: VarSet,
}

impl Expression {
    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn vars(&self) -> VarSet {
        self.vars
    }

    /// Build directly from an AST (used by the λ-transform rewriter).
    pub fn from_node(root: Node, vars: VarSet) -> Self {
        Expression { root, vars }
    }

    /// True if any subexpression references the given variable.
    pub fn references(&self, var: Var) -> bool {
        fn walk(node: &Node, var: Var) -> bool {
            match node {
                Node::Const(_) => false,
                Node::Var(v) => *v == var,
                Node::Neg(inner) => walk(inner, var),
                Node::Bin(_, l, r) => walk(l, var) || walk(r, var),
                Node::Call(_, args) | Node::ValueTerm(args) => {
                    args.iter().any(|a| walk(a, var))
                }
            }
        }
        walk(&self.root, var)
    }

    /// True if any `z` coordinate is referenced.
    pub fn references_z(&self) -> bool {
        (0..self.vars.noise_dim).any(|j| self.references(Var::Z(j)))
    }

    /// True if the expression contains a value term `V(...)`.
    pub fn has_value_term(&self) -> bool {
        fn walk(node: &Node) -> bool {
            match node {
                Node::Const(_) | Node::Var(_) => false,
                Node::Neg(inner) => walk(inner),
                Node::Bin(_, l, r) => walk(l) || walk(r),
                Node::Call(_, args) => args.iter().any(walk),
                Node::ValueTerm(_) => true,
            }
        }
        walk(&self.root)
    }

    pub fn evaluate(&self, ctx: &EvalContext) -> Result<f64, EvalError> {
        eval_node(&self.root, ctx)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, 0)
    }
}

// ─── parsing ───

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(v) => write!(f, "{v}"),
            Token::Ident(s) => write!(f, "{s}"),
            Token::Plus => write!(f, "+"),
            Token::Minus => write!(f, "-"),
            Token::Star => write!(f, "*"),
            Token::Slash => write!(f, "/"),
            Token::Caret => write!(f, "^"),
            Token::LParen => write!(f, "("),
            Token::RParen => write!(f, ")"),
            Token::Comma => write!(f, ","),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                tokens.push((Token::Plus, i));
                i += 1;
            }
            '-' => {
                tokens.push((Token::Minus, i));
                i += 1;
            }
            '*' => {
                tokens.push((Token::Star, i));
                i += 1;
            }
            '/' => {
                tokens.push((Token::Slash, i));
                i += 1;
            }
            '^' => {
                tokens.push((Token::Caret, i));
                i += 1;
            }
            '(' => {
                tokens.push((Token::LParen, i));
                i += 1;
            }
            ')' => {
                tokens.push((Token::RParen, i));
                i += 1;
            }
            ',' => {
                tokens.push((Token::Comma, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, '0'..='9' | '.')
                {
                    i += 1;
                }
                // exponent suffix: 1e-3, 2.5E+4
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let value: f64 = lit
                    .parse()
                    .map_err(|_| ParseError::BadNumber { pos: start })?;
                tokens.push((Token::Num(value), start));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                tokens.push((Token::Ident(text[start..i].to_string()), start));
            }
            other => return Err(ParseError::UnexpectedChar { ch: other, pos: i }),
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<(Token, usize)>,
    cursor: usize,
    vars: &'a VarSet,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&(Token, usize)> {
        self.tokens.get(self.cursor)
    }

    fn next(&mut self) -> Option<(Token, usize)> {
        let tok = self.tokens.get(self.cursor).cloned();
        if tok.is_some() {
            self.cursor += 1;
        }
        tok
    }

    fn expect(&mut self, want: Token, expected: &str) -> Result<usize, ParseError> {
        match self.next() {
            Some((tok, pos)) if tok == want => Ok(pos),
            Some((tok, pos)) => Err(ParseError::UnexpectedToken {
                token: tok.to_string(),
                pos,
            }),
            None => Err(ParseError::UnexpectedEnd {
                expected: expected.to_string(),
            }),
        }
    }

    // add := mul (('+'|'-') mul)*
    fn parse_add(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.parse_mul()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Token::Plus => BinOp::Add,
                Token::Minus => BinOp::Sub,
                _ => break,
            };
            self.cursor += 1;
            let rhs = self.parse_mul()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // mul := unary (('*'|'/') unary)*
    fn parse_mul(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.parse_unary()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Token::Star => BinOp::Mul,
                Token::Slash => BinOp::Div,
                _ => break,
            };
            self.cursor += 1;
            let rhs = self.parse_unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // unary := '-' unary | power
    // Unary minus binds tighter than '*' but looser than '^':
    // -x^2 parses as -(x^2).
    fn parse_unary(&mut self) -> Result<Node, ParseError> {
        if let Some((Token::Minus, _)) = self.peek() {
            self.cursor += 1;
            let inner = self.parse_unary()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.parse_power()
    }

    // power := atom ('^' unary)?   — right-associative, exponent may carry
    // its own unary minus (2^-3).
    fn parse_power(&mut self) -> Result<Node, ParseError> {
        let base = self.parse_atom()?;
        if let Some((Token::Caret, _)) = self.peek() {
            self.cursor += 1;
            let exponent = self.parse_unary()?;
            return Ok(Node::Bin(
                BinOp::Pow,
                Box::new(base),
                Box::new(exponent),
            ));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Node, ParseError> {
        match self.next() {
            Some((Token::Num(v), _)) => Ok(Node::Const(v)),
            Some((Token::LParen, _)) => {
                let inner = self.parse_add()?;
                self.expect(Token::RParen, "')'")?;
                Ok(inner)
            }
            Some((Token::Ident(name), pos)) => self.parse_ident(name, pos),
            Some((tok, pos)) => Err(ParseError::UnexpectedToken {
                token: tok.to_string(),
                pos,
            }),
            None => Err(ParseError::UnexpectedEnd {
                expected: "an expression".to_string(),
            }),
        }
    }

    fn parse_ident(&mut self, name: String, pos: usize) -> Result<Node, ParseError> {
        if name == "V" {
            if !self.vars.allow_value_term {
                return Err(ParseError::ValueTermForbidden { pos });
            }
            let args = self.parse_args()?;
            if args.len() != self.vars.state_dim {
                return Err(ParseError::WrongArity {
                    name: "V".to_string(),
                    expected: self.vars.state_dim,
                    got: args.len(),
                    pos,
                });
            }
            return Ok(Node::ValueTerm(args));
        }
        let func = match name.as_str() {
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "pow" => Some(Func::Pow),
            _ => None,
        };
        if let Some(func) = func {
            // function application requires parentheses; a bare function
            // name is treated as an unknown identifier
            if matches!(self.peek(), Some((Token::LParen, _))) {
                let args = self.parse_args()?;
                if args.len() != func.arity() {
                    return Err(ParseError::WrongArity {
                        name: name.clone(),
                        expected: func.arity(),
                        got: args.len(),
                        pos,
                    });
                }
                return Ok(Node::Call(func, args));
            }
        }
        let var = self.vars.resolve(&name, pos)?;
        Ok(Node::Var(var))
    }

    fn parse_args(&mut self) -> Result<Vec<Node>, ParseError> {
        self.expect(Token::LParen, "'('")?;
        let mut args = Vec::new();
        if matches!(self.peek(), Some((Token::RParen, _))) {
            self.cursor += 1;
            return Ok(args);
        }
        loop {
            args.push(self.parse_add()?);
            match self.next() {
                Some((Token::Comma, _)) => continue,
                Some((Token::RParen, _)) => break,
                Some((tok, pos)) => {
                    return Err(ParseError::UnexpectedToken {
                        token: tok.to_string(),
                        pos,
                    })
                }
                None => {
                    return Err(ParseError::UnexpectedEnd {
                        expected: "',' or ')'".to_string(),
                    })
                }
            }
        }
        Ok(args)
    }
}

/// Parse `text` against the allowed variable set.
pub fn parse(text: &str, vars: VarSet) -> Result<Expression, ParseError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens,
        cursor: 0,
        vars: &vars,
    };
    let root = parser.parse_add()?;
    if let Some((tok, pos)) = parser.peek() {
        return Err(ParseError::TrailingInput {
            pos: *pos,
            rest: tok.to_string(),
        });
    }
    Ok(Expression { root, vars })
}

// ─── evaluation ───

fn describe(node: &Node) -> String {
    struct D<'a>(&'a Node);
    impl fmt::Display for D<'_> {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write_node(f, self.0, 0)
        }
    }
    D(node).to_string()
}

fn lookup(var: Var, ctx: &EvalContext, node: &Node) -> Result<f64, EvalError> {
    let missing = || EvalError::MissingBinding {
        name: var.to_string(),
        expr: describe(node),
    };
    match var {
        Var::T => ctx.t.ok_or_else(missing),
        Var::Y => ctx.y.ok_or_else(missing),
        Var::X(i) => ctx.state.and_then(|s| s.get(i).copied()).ok_or_else(missing),
        Var::Z(i) => ctx.z.and_then(|z| z.get(i).copied()).ok_or_else(missing),
        Var::B(i) => ctx
            .action
            .and_then(|b| b.get(i).copied())
            .ok_or_else(missing),
    }
}

fn eval_node(node: &Node, ctx: &EvalContext) -> Result<f64, EvalError> {
    let value = match node {
        Node::Const(v) => *v,
        Node::Var(var) => lookup(*var, ctx, node)?,
        Node::Neg(inner) => -eval_node(inner, ctx)?,
        Node::Bin(op, l, r) => {
            let a = eval_node(l, ctx)?;
            let b = eval_node(r, ctx)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(EvalError::DivisionByZero(describe(node)));
                    }
                    a / b
                }
                BinOp::Pow => a.powf(b),
            }
        }
        Node::Call(func, args) => {
            let a = eval_node(&args[0], ctx)?;
            match func {
                Func::Exp => a.exp(),
                Func::Log => {
                    if a <= 0.0 {
                        return Err(EvalError::DomainError {
                            func: "log",
                            expr: describe(node),
                            value: a,
                        });
                    }
                    a.ln()
                }
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(EvalError::DomainError {
                            func: "sqrt",
                            expr: describe(node),
                            value: a,
                        });
                    }
                    a.sqrt()
                }
                Func::Abs => a.abs(),
                Func::Min => a.min(eval_node(&args[1], ctx)?),
                Func::Max => a.max(eval_node(&args[1], ctx)?),
                Func::Pow => a.powf(eval_node(&args[1], ctx)?),
            }
        }
        Node::ValueTerm(args) => {
            let value_fn = ctx
                .value_fn
                .ok_or_else(|| EvalError::MissingValueFunction(describe(node)))?;
            let t = ctx.t.ok_or_else(|| EvalError::MissingBinding {
                name: "t".to_string(),
                expr: describe(node),
            })?;
            let mut point = Vec::with_capacity(args.len());
            for arg in args {
                point.push(eval_node(arg, ctx)?);
            }
            value_fn(t, &point).map_err(|message| EvalError::ValueFunctionFailed {
                expr: describe(node),
                message,
            })?
        }
    };
    if !value.is_finite() {
        return Err(EvalError::NonFinite(describe(node)));
    }
    Ok(value)
}

// ─── printing ───
//
// Precedence levels for minimal parenthesization: 0 addition, 1
// multiplication, 2 unary minus, 3 power, 4 atoms. A child is wrapped when
// printing it at its parent's required level would re-associate it.

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, level: u8) -> fmt::Result {
    let own = match node {
        Node::Const(v) if *v < 0.0 => 2, // prints with a leading '-'
        Node::Const(_) | Node::Var(_) | Node::Call(..) | Node::ValueTerm(_) => 4,
        Node::Neg(_) => 2,
        Node::Bin(BinOp::Add | BinOp::Sub, ..) => 0,
        Node::Bin(BinOp::Mul | BinOp::Div, ..) => 1,
        Node::Bin(BinOp::Pow, ..) => 3,
    };
    if own < level {
        write!(f, "(")?;
        write_node(f, node, 0)?;
        return write!(f, ")");
    }
    match node {
        Node::Const(v) => {
            if *v < 0.0 {
                write!(f, "-{}", -v)
            } else {
                write!(f, "{v}")
            }
        }
        Node::Var(var) => write!(f, "{var}"),
        Node::Neg(inner) => {
            write!(f, "-")?;
            write_node(f, inner, 2)
        }
        Node::Bin(op, l, r) => {
            let (sym, left_level, right_level) = match op {
                BinOp::Add => ("+", 0, 1),
                BinOp::Sub => ("-", 0, 1),
                BinOp::Mul => ("*", 1, 2),
                BinOp::Div => ("/", 1, 2),
                // exponent side re-parses as long as it is unary-or-tighter
                BinOp::Pow => ("^", 4, 2),
            };
            write_node(f, l, left_level)?;
            write!(f, " {sym} ")?;
            write_node(f, r, right_level)
        }
        Node::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, arg) in args.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write_node(f, arg, 0)?;
            }
            write!(f, ")")
        }
        Node::ValueTerm(args) => {
            write!(f, "V(")?;
            for (i, arg) in args.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write_node(f, arg, 0)?;
            }
            write!(f, ")")
        }
    }
}
