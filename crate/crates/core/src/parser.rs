//! Line-oriented expression DSL with R-flavored operators.
//!
//! One assignment per line, `%*%` for matrix multiply, `t()` for transpose,
//! `*` element-wise. Common subexpressions within a script share a single
//! node. Scripts use the `.dml-lite` extension.

use crate::error::{Error, Result};
use crate::hop::{AggDir, AggFn, BinaryOp, HopDag, HopId, Op, TernaryOp, UnaryOp};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Sym(&'static str),
    Newline,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            col: self.col,
            msg: msg.into(),
        }
    }

    fn bump(&mut self) -> u8 {
        let b = self.src[self.pos];
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        b
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize, usize)>> {
        let mut out = Vec::new();
        while let Some(b) = self.peek() {
            let (line, col) = (self.line, self.col);
            match b {
                b'\n' => {
                    self.bump();
                    out.push((Tok::Newline, line, col));
                }
                b' ' | b'\t' | b'\r' => {
                    self.bump();
                }
                b'#' => {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                    let mut s = String::new();
                    while let Some(c) = self.peek() {
                        if c.is_ascii_alphanumeric() || c == b'_' {
                            s.push(self.bump() as char);
                        } else {
                            break;
                        }
                    }
                    out.push((Tok::Ident(s), line, col));
                }
                b'0'..=b'9' | b'.' => {
                    let start = self.pos;
                    while let Some(c) = self.peek() {
                        if c.is_ascii_digit() || c == b'.' {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    if matches!(self.peek(), Some(b'e') | Some(b'E')) {
                        self.bump();
                        if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                            self.bump();
                        }
                        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                            self.bump();
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    let v: f64 = text
                        .parse()
                        .map_err(|_| self.err(format!("bad number '{text}'")))?;
                    out.push((Tok::Num(v), line, col));
                }
                b'%' => {
                    self.bump();
                    if self.peek() == Some(b'*') {
                        self.bump();
                        if self.peek() == Some(b'%') {
                            self.bump();
                            out.push((Tok::Sym("%*%"), line, col));
                            continue;
                        }
                    }
                    return Err(self.err("expected '%*%'"));
                }
                b'!' | b'=' | b'<' | b'>' => {
                    self.bump();
                    if self.peek() == Some(b'=') {
                        self.bump();
                        let s = match b {
                            b'!' => "!=",
                            b'=' => "==",
                            b'<' => "<=",
                            _ => ">=",
                        };
                        out.push((Tok::Sym(s), line, col));
                    } else {
                        let s = match b {
                            b'=' => "=",
                            b'<' => "<",
                            b'>' => ">",
                            _ => return Err(self.err("unexpected '!'")),
                        };
                        out.push((Tok::Sym(s), line, col));
                    }
                }
                b'+' | b'-' | b'*' | b'/' | b'^' | b'(' | b')' | b'[' | b']' | b',' | b':' => {
                    self.bump();
                    let s = match b {
                        b'+' => "+",
                        b'-' => "-",
                        b'*' => "*",
                        b'/' => "/",
                        b'^' => "^",
                        b'(' => "(",
                        b')' => ")",
                        b'[' => "[",
                        b']' => "]",
                        b',' => ",",
                        _ => ":",
                    };
                    out.push((Tok::Sym(s), line, col));
                }
                other => return Err(self.err(format!("unexpected character '{}'", other as char))),
            }
        }
        out.push((Tok::Newline, self.line, self.col));
        Ok(out)
    }
}

const FUNCTIONS: &[&str] = &[
    "t", "sum", "sumSq", "rowSums", "colSums", "min", "max", "exp", "log", "sqrt", "abs", "round",
    "sign", "ifelse", "multadd", "cbind",
];

struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
    dag: HopDag,
    names: HashMap<String, HopId>,
    /// hash-cons table for CSE: structural key -> node
    interned: HashMap<String, HopId>,
}

impl Parser {
    fn err_here(&self, msg: impl Into<String>) -> Error {
        let (_, line, col) = &self.toks[self.pos.min(self.toks.len() - 1)];
        Error::Parse {
            line: *line,
            col: *col,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        self.pos += 1;
        t
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Tok::Sym(x) if *x == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.err_here(format!("expected '{s}'")))
        }
    }

    fn intern(&mut self, op: Op, inputs: Vec<HopId>) -> HopId {
        let key = match &op {
            Op::Literal(v) => format!("lit:{:x}", v.to_bits()),
            Op::Read(n) => format!("read:{n}"),
            other => format!("{other:?}:{inputs:?}"),
        };
        if let Some(&id) = self.interned.get(&key) {
            return id;
        }
        let id = self.dag.add(op, inputs);
        self.interned.insert(key, id);
        id
    }

    fn lit(&mut self, v: f64) -> HopId {
        self.intern(Op::Literal(v), vec![])
    }

    /// Constant-folds pure-literal expressions into a single literal node.
    fn fold_or_add(&mut self, op: Op, inputs: Vec<HopId>) -> HopId {
        let vals: Option<Vec<f64>> = inputs
            .iter()
            .map(|&i| match self.dag.node(i).op {
                Op::Literal(v) => Some(v),
                _ => None,
            })
            .collect();
        if let Some(vals) = vals {
            let folded = match &op {
                Op::Unary(u) => Some(crate::reference::apply_unary(*u, vals[0])),
                Op::Binary(b) => Some(crate::reference::apply_binary(*b, vals[0], vals[1])),
                Op::Ternary(t) => {
                    Some(crate::reference::apply_ternary(*t, vals[0], vals[1], vals[2]))
                }
                _ => None,
            };
            if let Some(v) = folded {
                return self.lit(v);
            }
        }
        self.intern(op, inputs)
    }

    fn script(mut self) -> Result<(HopDag, Vec<(String, HopId)>)> {
        let mut assigned: Vec<(String, HopId)> = Vec::new();
        loop {
            while matches!(self.peek(), Tok::Newline) {
                if self.pos + 1 >= self.toks.len() {
                    self.pos += 1;
                    break;
                }
                self.pos += 1;
            }
            if self.pos >= self.toks.len() {
                break;
            }
            let name = match self.next() {
                Tok::Ident(n) => n,
                _ => return Err(self.err_here("expected assignment target")),
            };
            if FUNCTIONS.contains(&name.as_str()) {
                return Err(self.err_here(format!("'{name}' is a reserved function name")));
            }
            if self.names.contains_key(&name) {
                return Err(self.err_here(format!("'{name}' assigned twice")));
            }
            self.expect_sym("=")?;
            let id = self.expr()?;
            if !matches!(self.peek(), Tok::Newline) {
                return Err(self.err_here("expected end of statement"));
            }
            self.names.insert(name.clone(), id);
            assigned.push((name, id));
        }
        Ok((self.dag, assigned))
    }

    fn expr(&mut self) -> Result<HopId> {
        self.comparison()
    }

    fn comparison(&mut self) -> Result<HopId> {
        let mut lhs = self.add_sub()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("!=") => BinaryOp::Neq,
                Tok::Sym("==") => BinaryOp::Eq,
                Tok::Sym("<") => BinaryOp::Lt,
                Tok::Sym(">") => BinaryOp::Gt,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.add_sub()?;
            lhs = self.fold_or_add(Op::Binary(op), vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn add_sub(&mut self) -> Result<HopId> {
        let mut lhs = self.mul_div()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("+") => BinaryOp::Add,
                Tok::Sym("-") => BinaryOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.mul_div()?;
            lhs = self.fold_or_add(Op::Binary(op), vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn mul_div(&mut self) -> Result<HopId> {
        let mut lhs = self.matmul()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("*") => BinaryOp::Mult,
                Tok::Sym("/") => BinaryOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.matmul()?;
            lhs = self.fold_or_add(Op::Binary(op), vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn matmul(&mut self) -> Result<HopId> {
        let mut lhs = self.unary()?;
        while self.eat_sym("%*%") {
            let rhs = self.unary()?;
            lhs = self.intern(Op::MatMul, vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<HopId> {
        if self.eat_sym("-") {
            let inner = self.unary()?;
            if let Op::Literal(v) = self.dag.node(inner).op {
                return Ok(self.lit(-v));
            }
            let zero = self.lit(0.0);
            return Ok(self.intern(Op::Binary(BinaryOp::Sub), vec![zero, inner]));
        }
        self.power()
    }

    fn power(&mut self) -> Result<HopId> {
        let base = self.postfix()?;
        if self.eat_sym("^") {
            let exp = self.unary()?; // right-associative
            return Ok(self.fold_or_add(Op::Binary(BinaryOp::Pow), vec![base, exp]));
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<HopId> {
        let mut e = self.primary()?;
        while self.eat_sym("[") {
            self.expect_sym(",")?;
            let from = self.int_literal()?;
            self.expect_sym(":")?;
            let to = self.int_literal()?;
            self.expect_sym("]")?;
            e = self.intern(Op::ColIndex { from, to }, vec![e]);
        }
        Ok(e)
    }

    fn int_literal(&mut self) -> Result<u64> {
        match self.next() {
            Tok::Num(v) if v.fract() == 0.0 && v >= 0.0 => Ok(v as u64),
            _ => Err(self.err_here("expected integer literal in column range")),
        }
    }

    fn primary(&mut self) -> Result<HopId> {
        match self.next() {
            Tok::Num(v) => Ok(self.lit(v)),
            Tok::Sym("(") => {
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if self.eat_sym("(") {
                    return self.call(&name);
                }
                if FUNCTIONS.contains(&name.as_str()) {
                    return Err(self.err_here(format!("function '{name}' used without arguments")));
                }
                if let Some(&id) = self.names.get(&name) {
                    return Ok(id);
                }
                Ok(self.intern(Op::Read(name), vec![]))
            }
            _ => Err(self.err_here("expected expression")),
        }
    }

    fn call(&mut self, name: &str) -> Result<HopId> {
        let mut args = Vec::new();
        if !self.eat_sym(")") {
            loop {
                args.push(self.expr()?);
                if self.eat_sym(")") {
                    break;
                }
                self.expect_sym(",")?;
            }
        }
        let got = args.len();
        let arity_err = move |expected: usize| Error::ArityMismatch {
            name: name.to_string(),
            expected,
            got,
        };
        let unary = |p: &mut Parser, u: UnaryOp, args: Vec<HopId>| {
            if args.len() != 1 {
                return Err(arity_err(1));
            }
            Ok(p.fold_or_add(Op::Unary(u), args))
        };
        let agg = |p: &mut Parser, f: AggFn, d: AggDir, args: Vec<HopId>| {
            if args.len() != 1 {
                return Err(arity_err(1));
            }
            Ok(p.intern(Op::Agg(f, d), args))
        };
        match name {
            "t" => {
                if args.len() != 1 {
                    return Err(arity_err(1));
                }
                Ok(self.intern(Op::Transpose, args))
            }
            "sum" => agg(self, AggFn::Sum, AggDir::Full, args),
            "sumSq" => agg(self, AggFn::SumSq, AggDir::Full, args),
            "rowSums" => agg(self, AggFn::Sum, AggDir::Row, args),
            "colSums" => agg(self, AggFn::Sum, AggDir::Col, args),
            "min" | "max" => {
                let full = if name == "min" { AggFn::Min } else { AggFn::Max };
                let binop = if name == "min" {
                    BinaryOp::Min
                } else {
                    BinaryOp::Max
                };
                match args.len() {
                    1 => agg(self, full, AggDir::Full, args),
                    2 => Ok(self.fold_or_add(Op::Binary(binop), args)),
                    _ => Err(arity_err(2)),
                }
            }
            "exp" => unary(self, UnaryOp::Exp, args),
            "log" => unary(self, UnaryOp::Log, args),
            "sqrt" => unary(self, UnaryOp::Sqrt, args),
            "abs" => unary(self, UnaryOp::Abs, args),
            "round" => unary(self, UnaryOp::Round, args),
            "sign" => unary(self, UnaryOp::Sign, args),
            "ifelse" => {
                if args.len() != 3 {
                    return Err(arity_err(3));
                }
                Ok(self.fold_or_add(Op::Ternary(TernaryOp::IfElse), args))
            }
            "multadd" => {
                if args.len() != 3 {
                    return Err(arity_err(3));
                }
                Ok(self.fold_or_add(Op::Ternary(TernaryOp::MultAdd), args))
            }
            "cbind" => {
                if args.len() != 2 {
                    return Err(arity_err(2));
                }
                Ok(self.intern(Op::Cbind, args))
            }
            other => Err(Error::UnknownFunction(other.to_string())),
        }
    }
}

/// Parses a script into a HopDag. Outputs are the assigned names whose node
/// has no consumer (the DAG roots).
pub fn parse_script(text: &str) -> Result<HopDag> {
    let toks = Lexer::new(text).tokens()?;
    let parser = Parser {
        toks,
        pos: 0,
        dag: HopDag::new(),
        names: HashMap::new(),
        interned: HashMap::new(),
    };
    let (mut dag, assigned) = parser.script()?;
    dag.outputs = assigned
        .into_iter()
        .filter(|(_, id)| dag.consumers(*id).is_empty())
        .collect();
    if dag.outputs.is_empty() && !dag.is_empty() {
        return Err(Error::Parse {
            line: 0,
            col: 0,
            msg: "script has no root output".into(),
        });
    }
    Ok(dag)
}

const PREC_CMP: u8 = 1;
const PREC_ADD: u8 = 2;
const PREC_MUL: u8 = 3;
const PREC_MATMUL: u8 = 4;
const PREC_POW: u8 = 5;
const PREC_ATOM: u8 = 10;

/// Renders a DAG back to canonical script text. Multi-consumer nodes become
/// named temporaries, so parse -> unparse -> parse is a fixpoint on this form.
pub fn unparse(dag: &HopDag) -> String {
    let mut names: HashMap<HopId, String> = HashMap::new();
    for (name, id) in &dag.outputs {
        names.entry(*id).or_insert_with(|| name.clone());
    }
    let mut tmp = 0usize;
    for h in dag.nodes() {
        if h.op.is_leaf() {
            continue;
        }
        if dag.consumers(h.id).len() > 1 && !names.contains_key(&h.id) {
            names.insert(h.id, format!("tmp{tmp}"));
            tmp += 1;
        }
    }
    let mut out = String::new();
    let mut ordered: Vec<(HopId, &String)> = names.iter().map(|(k, v)| (*k, v)).collect();
    ordered.sort_by_key(|(id, _)| *id);
    for (id, name) in ordered {
        let mut line = String::new();
        render(dag, id, &names, 0, true, &mut line);
        out.push_str(&format!("{name} = {line}\n"));
    }
    out
}

fn render(
    dag: &HopDag,
    id: HopId,
    names: &HashMap<HopId, String>,
    parent_prec: u8,
    top: bool,
    out: &mut String,
) {
    if !top {
        if let Some(n) = names.get(&id) {
            out.push_str(n);
            return;
        }
    }
    let h = dag.node(id);
    let prec = match &h.op {
        Op::Binary(BinaryOp::Neq | BinaryOp::Eq | BinaryOp::Lt | BinaryOp::Gt) => PREC_CMP,
        Op::Binary(BinaryOp::Add | BinaryOp::Sub) => PREC_ADD,
        Op::Binary(BinaryOp::Mult | BinaryOp::Div) => PREC_MUL,
        Op::Binary(BinaryOp::Pow) => PREC_POW,
        Op::MatMul => PREC_MATMUL,
        _ => PREC_ATOM,
    };
    let needs_parens = prec < PREC_ATOM && prec <= parent_prec;
    if needs_parens {
        out.push('(');
    }
    match &h.op {
        Op::Read(n) => out.push_str(n),
        Op::Literal(v) => out.push_str(&format!("{v:?}")),
        Op::Binary(b) => {
            let sym = match b {
                BinaryOp::Add => " + ",
                BinaryOp::Sub => " - ",
                BinaryOp::Mult => " * ",
                BinaryOp::Div => " / ",
                BinaryOp::Pow => "^",
                BinaryOp::Neq => " != ",
                BinaryOp::Eq => " == ",
                BinaryOp::Lt => " < ",
                BinaryOp::Gt => " > ",
                BinaryOp::Min | BinaryOp::Max => {
                    let f = if *b == BinaryOp::Min { "min" } else { "max" };
                    out.push_str(f);
                    out.push('(');
                    render(dag, h.inputs[0], names, 0, false, out);
                    out.push_str(", ");
                    render(dag, h.inputs[1], names, 0, false, out);
                    out.push(')');
                    if needs_parens {
                        out.push(')');
                    }
                    return;
                }
            };
            // left child may share this precedence level; right child needs
            // parens at equal precedence for the non-associative operators
            render(dag, h.inputs[0], names, prec - 1, false, out);
            out.push_str(sym);
            render(dag, h.inputs[1], names, prec, false, out);
        }
        Op::MatMul => {
            render(dag, h.inputs[0], names, prec - 1, false, out);
            out.push_str(" %*% ");
            render(dag, h.inputs[1], names, prec, false, out);
        }
        Op::Unary(u) => {
            let f = match u {
                UnaryOp::Exp => "exp",
                UnaryOp::Log => "log",
                UnaryOp::Sqrt => "sqrt",
                UnaryOp::Abs => "abs",
                UnaryOp::Round => "round",
                UnaryOp::Sign => "sign",
                UnaryOp::Sq => {
                    render(dag, h.inputs[0], names, PREC_POW, false, out);
                    out.push_str("^2.0");
                    if needs_parens {
                        out.push(')');
                    }
                    return;
                }
            };
            out.push_str(f);
            out.push('(');
            render(dag, h.inputs[0], names, 0, false, out);
            out.push(')');
        }
        Op::Ternary(t) => {
            let f = match t {
                TernaryOp::IfElse => "ifelse",
                TernaryOp::MultAdd => "multadd",
            };
            out.push_str(f);
            out.push('(');
            for (k, &i) in h.inputs.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                render(dag, i, names, 0, false, out);
            }
            out.push(')');
        }
        Op::Agg(f, d) => {
            let name = match (f, d) {
                (AggFn::Sum, AggDir::Full) => "sum",
                (AggFn::Sum, AggDir::Row) => "rowSums",
                (AggFn::Sum, AggDir::Col) => "colSums",
                (AggFn::SumSq, AggDir::Full) => "sumSq",
                (AggFn::Min, AggDir::Full) => "min",
                (AggFn::Max, AggDir::Full) => "max",
                other => unreachable!("unsupported aggregate {other:?}"),
            };
            out.push_str(name);
            out.push('(');
            render(dag, h.inputs[0], names, 0, false, out);
            out.push(')');
        }
        Op::Transpose => {
            out.push_str("t(");
            render(dag, h.inputs[0], names, 0, false, out);
            out.push(')');
        }
        Op::ColIndex { from, to } => {
            render(dag, h.inputs[0], names, PREC_ATOM - 1, false, out);
            out.push_str(&format!("[, {from}:{to}]"));
        }
        Op::Cbind => {
            out.push_str("cbind(");
            render(dag, h.inputs[0], names, 0, false, out);
            out.push_str(", ");
            render(dag, h.inputs[1], names, 0, false, out);
            out.push(')');
        }
    }
    if needs_parens {
        out.push(')');
    }
}
