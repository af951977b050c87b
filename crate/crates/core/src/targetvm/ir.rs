//! Symbolic intermediate representation. Operands name symbols; linking
//! into a process turns them into function ids and cell addresses.

use serde::{Deserialize, Serialize};

use crate::csubset::ast::{BinOp, UnOp};
use crate::csubset::ScalarType;

pub type Reg = u32;

/// How a storage location interprets the values written to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellTy {
    Scalar(ScalarType),
    FnPtr,
    StructPtr,
}

impl CellTy {
    /// Packed into site operands next to an address.
    pub fn code(self) -> u8 {
        match self {
            CellTy::Scalar(s) => s.code(),
            CellTy::FnPtr => 30,
            CellTy::StructPtr => 31,
        }
    }

    pub fn from_code(c: u8) -> Option<CellTy> {
        match c {
            30 => Some(CellTy::FnPtr),
            31 => Some(CellTy::StructPtr),
            c => ScalarType::from_code(c).map(CellTy::Scalar),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Const {
    Int(i128),
    Float(f64),
    Str(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    Trace,
    Emit,
    Sleep,
}

/// One IR instruction. Jump targets are instruction indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Const {
        dst: Reg,
        value: Const,
    },
    Mov {
        dst: Reg,
        src: Reg,
    },
    /// `ty` is the operation type: operands are converted to it and
    /// arithmetic results wrap to it. `None` compares raw values (pointer
    /// equality) and is only valid for `Eq`/`Ne`.
    Bin {
        op: BinOp,
        dst: Reg,
        a: Reg,
        b: Reg,
        ty: Option<ScalarType>,
    },
    Un {
        op: UnOp,
        dst: Reg,
        a: Reg,
        ty: ScalarType,
    },
    Conv {
        dst: Reg,
        src: Reg,
        ty: ScalarType,
    },
    LoadG {
        dst: Reg,
        sym: String,
        offset: u32,
        ty: CellTy,
    },
    StoreG {
        src: Reg,
        sym: String,
        offset: u32,
        ty: CellTy,
    },
    AddrG {
        dst: Reg,
        sym: String,
    },
    LoadF {
        dst: Reg,
        base: Reg,
        offset: u32,
        ty: CellTy,
    },
    StoreF {
        src: Reg,
        base: Reg,
        offset: u32,
        ty: CellTy,
    },
    LoadFn {
        dst: Reg,
        sym: String,
    },
    Call {
        dst: Option<Reg>,
        sym: String,
        args: Vec<Reg>,
    },
    ICall {
        dst: Option<Reg>,
        callee: Reg,
        args: Vec<Reg>,
    },
    Builtin {
        dst: Option<Reg>,
        builtin: Builtin,
        args: Vec<Reg>,
    },
    LoadSh {
        dst: Reg,
        strukt: String,
        field: String,
        key: Reg,
    },
    StoreSh {
        src: Reg,
        strukt: String,
        field: String,
        key: Reg,
    },
    Jmp {
        target: u32,
    },
    Br {
        cond: Reg,
        if_true: u32,
        if_false: u32,
    },
    Ret {
        src: Option<Reg>,
    },
    Fatal {
        args: Vec<Reg>,
    },
    Alarm {
        message: String,
    },
    Halt,
}

impl Op {
    pub fn jump_targets_mut(&mut self) -> Vec<&mut u32> {
        match self {
            Op::Jmp { target } => vec![target],
            Op::Br { if_true, if_false, .. } => vec![if_true, if_false],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrFunction {
    pub name: String,
    pub params: Vec<CellTy>,
    pub ret: Option<CellTy>,
    pub variadic: bool,
    pub nregs: u32,
    pub code: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellInit {
    Zero,
    Int(i128),
    Float(f64),
    /// Address of a function.
    Fn(String),
    /// Address of a global's first cell.
    Addr(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrCell {
    pub ty: CellTy,
    pub init: CellInit,
}

/// A global occupies one cell per scalar; structs use one per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrGlobal {
    pub name: String,
    pub cells: Vec<IrCell>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgramIr {
    pub globals: Vec<IrGlobal>,
    pub functions: Vec<IrFunction>,
}

pub const IMAGE_HEADER: &str = "HOTMEND-IMAGE v1";

impl ProgramIr {
    /// Versioned text form: a header line then canonical JSON.
    pub fn to_image(&self) -> String {
        format!("{IMAGE_HEADER}\n{}", crate::canon::to_canonical_pretty(self))
    }

    pub fn from_image(text: &str) -> Result<ProgramIr, String> {
        let body = text.strip_prefix(IMAGE_HEADER).and_then(|r| r.strip_prefix('\n')).ok_or_else(|| format!("missing '{IMAGE_HEADER}' header"))?;
        crate::canon::from_canonical(body).map_err(|e| format!("bad image: {e}"))
    }

    /// Symbols an IR unit references but does not define.
    pub fn external_symbols(&self) -> std::collections::BTreeSet<String> {
        let mut defined: std::collections::BTreeSet<&str> = self.functions.iter().map(|f| f.name.as_str()).collect();
        defined.extend(self.globals.iter().map(|g| g.name.as_str()));
        let mut out = std::collections::BTreeSet::new();
        let mut use_sym = |s: &str| {
            if !defined.contains(s) {
                out.insert(s.to_string());
            }
        };
        for f in &self.functions {
            for op in &f.code {
                match op {
                    Op::LoadG { sym, .. } | Op::StoreG { sym, .. } | Op::AddrG { sym, .. } | Op::LoadFn { sym, .. } | Op::Call { sym, .. } => {
                        use_sym(sym)
                    }
                    _ => {}
                }
            }
        }
        for g in &self.globals {
            for c in &g.cells {
                if let CellInit::Fn(s) | CellInit::Addr(s) = &c.init {
                    use_sym(s);
                }
            }
        }
        out
    }
}
