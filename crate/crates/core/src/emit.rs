//! Textual emission of fused operators.
//!
//! The output names temporaries TMP<n> in topological order and is byte
//! deterministic for a given plan; it is inspection output and golden-file
//! material, never compiled.

use crate::cplan::{CNodeId, CNodeOp, CPlan, MSource, Variant};
use crate::hop::{AggFn, BinaryOp, TernaryOp, UnaryOp};
use crate::side_input::SideAccess;
use crate::templates::TemplateKind;

fn unary_name(u: UnaryOp) -> &'static str {
    match u {
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Abs => "abs",
        UnaryOp::Round => "round",
        UnaryOp::Sign => "sign",
        UnaryOp::Sq => "sq",
    }
}

fn binary_sym(b: BinaryOp) -> &'static str {
    match b {
        BinaryOp::Add => "+",
        BinaryOp::Sub => "-",
        BinaryOp::Mult => "*",
        BinaryOp::Div => "/",
        BinaryOp::Min => "min",
        BinaryOp::Max => "max",
        BinaryOp::Neq => "!=",
        BinaryOp::Lt => "<",
        BinaryOp::Gt => ">",
        BinaryOp::Eq => "==",
        BinaryOp::Pow => "^",
    }
}

fn vec_binary_name(b: BinaryOp) -> &'static str {
    match b {
        BinaryOp::Add => "vectPlus",
        BinaryOp::Sub => "vectMinus",
        BinaryOp::Mult => "vectMult",
        BinaryOp::Div => "vectDiv",
        BinaryOp::Min => "vectMin2",
        BinaryOp::Max => "vectMax2",
        BinaryOp::Neq => "vectNeq",
        BinaryOp::Lt => "vectLt",
        BinaryOp::Gt => "vectGt",
        BinaryOp::Eq => "vectEq",
        BinaryOp::Pow => "vectPow",
    }
}

fn vec_agg_name(f: AggFn) -> &'static str {
    match f {
        AggFn::Sum => "vectSum",
        AggFn::SumSq => "vectSumSq",
        AggFn::Min => "vectMin",
        AggFn::Max => "vectMax",
    }
}

fn agg_name(f: AggFn) -> &'static str {
    match f {
        AggFn::Sum => "sum",
        AggFn::SumSq => "sumSq",
        AggFn::Min => "min",
        AggFn::Max => "max",
    }
}

/// Renders a plan as readable operator source.
pub fn emit_source(plan: &CPlan) -> String {
    let mut out = String::new();
    let tname = match plan.template {
        TemplateKind::Cell => "cell",
        TemplateKind::MultiAgg => "magg",
        TemplateKind::Row => "row",
        TemplateKind::Outer => "outer",
    };
    out.push_str(&format!(
        "operator fused_{:016x} {}({})",
        plan.structural_hash,
        tname,
        plan.variant_name()
    ));
    if plan.template == TemplateKind::Row {
        out.push_str(&format!(" ring={}", plan.ring_buffer_size));
    }
    if plan.sparse_safe {
        out.push_str(" sparse_safe");
    }
    out.push_str(" {\n");
    out.push_str(&format!(
        "  main {}: {} {}\n",
        plan.main.name,
        plan.main.dims,
        if plan.template == TemplateKind::Outer {
            "nonzero cells"
        } else if plan.template == TemplateKind::Row {
            "rows"
        } else {
            "cells"
        }
    ));
    if let Some(o) = &plan.outer {
        out.push_str(&format!("  factor u: {} rank={}\n", o.u_name, o.rank));
        out.push_str(&format!("  factor v: {} rank={}\n", o.v_name, o.rank));
    }
    for (i, s) in plan.sides.iter().enumerate() {
        let acc = match s.access {
            SideAccess::Full => "full",
            SideAccess::RowIndexed => "row",
            SideAccess::CellIndexed => "cell",
        };
        out.push_str(&format!("  side b[{i}]: {} {} {}\n", s.name, s.dims, acc));
    }
    for (i, (_, name)) in plan.scalars.iter().enumerate() {
        out.push_str(&format!("  scalar s[{i}]: {name}\n"));
    }
    out.push_str("}\n");

    let args = match plan.template {
        TemplateKind::Row => "a, b, s, c, rix",
        TemplateKind::Outer => "a, u, v, b, s, c, rix, cix",
        _ => "a, b, s, rix, cix",
    };
    out.push_str(&format!("genexec({args}):\n"));

    // schedule: nodes in index order, skipping pure bindings
    let mut names: Vec<Option<String>> = vec![None; plan.body.len()];
    let mut next_tmp = 0usize;
    let mut lines: Vec<String> = Vec::new();
    for (i, node) in plan.body.iter().enumerate() {
        let expr: Option<String> = match &node.op {
            CNodeOp::MainCell => {
                names[i] = Some("a".into());
                None
            }
            CNodeOp::MainRow => {
                names[i] = Some("a".into());
                None
            }
            CNodeOp::Lit(v) => {
                names[i] = Some(format!("{v:?}"));
                None
            }
            CNodeOp::ScalarInput(k) => {
                names[i] = Some(format!("s[{k}]"));
                None
            }
            CNodeOp::SideCell {
                side,
                swap,
                col_offset,
            } => {
                let idx = match (swap, col_offset) {
                    (false, 0) => {
                        if plan.sides[*side].dims.is_col_vector() {
                            "rix".to_string()
                        } else {
                            "rix, cix".to_string()
                        }
                    }
                    (false, off) => format!("rix, cix+{off}"),
                    (true, 0) => "cix, rix".to_string(),
                    (true, off) => format!("cix, rix+{off}"),
                };
                Some(format!("getValue(b[{side}], {idx})"))
            }
            CNodeOp::SideRowValue(side) => Some(format!("getValue(b[{side}], rix)")),
            CNodeOp::SideRowVec {
                side,
                from,
                to,
                broadcast_row,
            } => {
                let row = if *broadcast_row { "0" } else { "rix" };
                if *from == 0 && *to == plan.sides[*side].dims.cols {
                    Some(format!("getVector(b[{side}], {row})"))
                } else {
                    Some(format!("getVector(b[{side}], {row}, {from}, {to})"))
                }
            }
            CNodeOp::Unary(u) => Some(format!("{}({})", unary_name(*u), names[node.children[0]].as_ref().unwrap())),
            CNodeOp::Binary(b) => {
                let l = names[node.children[0]].as_ref().unwrap();
                let r = names[node.children[1]].as_ref().unwrap();
                match b {
                    BinaryOp::Min | BinaryOp::Max => {
                        Some(format!("{}({l}, {r})", binary_sym(*b)))
                    }
                    _ => Some(format!("({l} {} {r})", binary_sym(*b))),
                }
            }
            CNodeOp::Ternary(t) => {
                let n = |k: usize| names[node.children[k]].as_ref().unwrap();
                match t {
                    TernaryOp::IfElse => Some(format!("({} ? {} : {})", n(0), n(1), n(2))),
                    TernaryOp::MultAdd => Some(format!("({} * {} + {})", n(0), n(1), n(2))),
                }
            }
            CNodeOp::VecUnary(u) => Some(format!(
                "vect{}Write({})",
                capitalize(unary_name(*u)),
                names[node.children[0]].as_ref().unwrap()
            )),
            CNodeOp::VecBinary(b) => {
                let l = names[node.children[0]].as_ref().unwrap();
                let r = names[node.children[1]].as_ref().unwrap();
                Some(format!("{}({l}, {r})", vec_binary_name(*b)))
            }
            CNodeOp::VecAgg(f) => Some(format!(
                "{}({})",
                vec_agg_name(*f),
                names[node.children[0]].as_ref().unwrap()
            )),
            CNodeOp::VecMatMult { side } => Some(format!(
                "vectMatMult({}, b[{side}])",
                names[node.children[0]].as_ref().unwrap()
            )),
            CNodeOp::VecSlice { from, to } => Some(format!(
                "vectSlice({}, {from}, {to})",
                names[node.children[0]].as_ref().unwrap()
            )),
            CNodeOp::OuterDot => Some("dotProduct(u, v, len)".to_string()),
        };
        if let Some(e) = expr {
            // bindings fold inline, computed values get temporaries
            let trivial = matches!(
                node.op,
                CNodeOp::SideCell { .. } | CNodeOp::SideRowValue(_)
            ) && false;
            if trivial {
                names[i] = Some(e);
            } else {
                let name = format!("TMP{next_tmp}");
                next_tmp += 1;
                lines.push(format!("  {name} = {e}"));
                names[i] = Some(name);
            }
        }
    }
    for l in &lines {
        out.push_str(l);
        out.push('\n');
    }
    let tail = emit_tail(plan, &names, plan.roots[0]);
    out.push_str(&tail);
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn emit_tail(plan: &CPlan, names: &[Option<String>], root: CNodeId) -> String {
    let rn = names[root].as_ref().unwrap();
    match (&plan.template, &plan.variant) {
        (TemplateKind::Row, Variant::RowColTAgg) => {
            format!("  vectOuterMultAdd(a, {rn}, c)\n")
        }
        (TemplateKind::Row, Variant::RowNoAgg) => format!("  writeRow(c, rix, {rn})\n"),
        (TemplateKind::Row, Variant::RowAgg(f, dir)) => {
            format!("  aggregate[{}, {dir:?}](c, {rn})\n", agg_name(*f))
        }
        (TemplateKind::Outer, Variant::OuterRightMm(m)) => {
            format!("  vectMultAdd({}, {rn}, c, rix)\n", m_name(*m))
        }
        (TemplateKind::Outer, Variant::OuterLeftMm(m)) => {
            format!("  vectMultAddCol({}, {rn}, c, cix)\n", m_name(*m))
        }
        (TemplateKind::Outer, Variant::OuterFullAgg(f)) => {
            format!("  aggregate[{}](c, {rn})\n", agg_name(*f))
        }
        (TemplateKind::MultiAgg, Variant::MultiAgg(fs)) => {
            let mut s = String::new();
            for (k, f) in fs.iter().enumerate() {
                s.push_str(&format!(
                    "  aggregate[{}](c[{k}], {})\n",
                    agg_name(*f),
                    names[plan.roots[k]].as_ref().unwrap()
                ));
            }
            s
        }
        (_, Variant::CellAgg(f, dir)) => {
            format!("  aggregate[{}, {dir:?}](c, {rn})\n", agg_name(*f))
        }
        _ => format!("  return {rn}\n"),
    }
}

fn m_name(m: MSource) -> String {
    match m {
        MSource::U => "u".into(),
        MSource::V => "v".into(),
        MSource::Side(i) => format!("b[{i}]"),
    }
}
