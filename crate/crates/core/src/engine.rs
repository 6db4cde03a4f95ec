//! Cycle-accurate model of the classification engine.
//!
//! The datapath is an input latch, a 13-way sub-field multiplexer, an 8-bit
//! comparator, a program counter with jump and hold, and a final compile
//! unit that raises `forward` and drives `valid`. Control follows the
//! idle → process_1 ⇄ process_2 → stop state machine. One sub-rule word is
//! fetched, compared and retired per clock; the process_2 status check
//! happens in the same clock.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::PacketHeader;
use crate::isa::{CompareOp, MemoryImage, Selector, Word};

/// Step budget for a single classification. Forward-only images finish in
/// at most 256 steps; this only trips on looping hand-written images.
pub const WATCHDOG_STEPS: u32 = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fsm {
    Idle,
    Process1,
    Process2,
    Stop,
}

impl fmt::Display for Fsm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fsm::Idle => "idle",
            Fsm::Process1 => "process_1",
            Fsm::Process2 => "process_2",
            Fsm::Stop => "stop",
        })
    }
}

/// Observable engine registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineState {
    pub fsm: Fsm,
    pub pc: u8,
    pub latched: PacketHeader,
    pub valid_out: bool,
    pub forward_out: bool,
    pub hold: bool,
}

impl EngineState {
    const RESET: EngineState = EngineState {
        fsm: Fsm::Idle,
        pc: 0,
        latched: PacketHeader {
            proto: 0,
            src_ip: 0,
            dst_ip: 0,
            src_port: 0,
            dst_port: 0,
        },
        valid_out: false,
        forward_out: false,
        hold: false,
    };
}

/// One executed word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub cycle: u32,
    pub pc: u8,
    pub word: Word,
    pub selector: Selector,
    pub subfield: u8,
    pub op: CompareOp,
    pub operand: u8,
    pub matched: bool,
    /// `None` when this word stopped the engine.
    pub next_pc: Option<u8>,
}

pub const TRACE_HEADER: &str = "# cycle pc word selector subfield op operand match next_pc";

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:02x} {:06x} {:x} {:02x} {} {:02x} {}",
            self.cycle,
            self.pc,
            self.word.get(),
            self.selector.index(),
            self.subfield,
            self.op.mnemonic(),
            self.operand,
            u8::from(self.matched),
        )?;
        match self.next_pc {
            Some(pc) => write!(f, " {pc:02x}"),
            None => f.write_str(" stop"),
        }
    }
}

/// Result of one classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    /// The `valid` output.
    pub permit: bool,
    /// Words executed, one per clock.
    pub cycles: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum EngineError {
    #[error("empty rules memory image")]
    EmptyImage,
    #[error("engine idle")]
    Idle,
    #[error("engine busy: classification in progress")]
    Busy,
    #[error("invalid selector {selector} at {pc:#04x}")]
    InvalidSelector { pc: u8, selector: u8 },
    #[error("program counter {pc:#x} outside {len}-word image")]
    PcOutOfRange { pc: usize, len: usize },
    #[error("watchdog: no verdict after {steps} steps")]
    Watchdog { steps: u32 },
}

/// One engine instance over a shared image. Not meant to be shared between
/// threads mid-run; clone it or load another per worker.
#[derive(Debug, Clone)]
pub struct Engine {
    image: Arc<MemoryImage>,
    state: EngineState,
    cycles: u32,
    trace: Option<Vec<TraceEntry>>,
}

impl Engine {
    /// Loads an image into the rules memory. The engine starts idle.
    pub fn load(image: impl Into<Arc<MemoryImage>>) -> Result<Engine, EngineError> {
        let image = image.into();
        if image.is_empty() {
            return Err(EngineError::EmptyImage);
        }
        Ok(Engine {
            image,
            state: EngineState::RESET,
            cycles: 0,
            trace: None,
        })
    }

    pub fn image(&self) -> &MemoryImage {
        &self.image
    }

    pub fn state(&self) -> EngineState {
        self.state
    }

    pub fn cycles(&self) -> u32 {
        self.cycles
    }

    /// RESET: clears the latch, outputs and program counter.
    pub fn reset(&mut self) {
        self.state = EngineState::RESET;
        self.cycles = 0;
        self.trace = None;
    }

    /// START pulse: latches `header` and enters process_1 with outputs
    /// cleared. A finished engine returns to idle on its own, so this is
    /// accepted from both idle and stop.
    pub fn start(&mut self, header: PacketHeader, record_trace: bool) -> Result<(), EngineError> {
        match self.state.fsm {
            Fsm::Idle | Fsm::Stop => {}
            Fsm::Process1 | Fsm::Process2 => return Err(EngineError::Busy),
        }
        self.state = EngineState {
            fsm: Fsm::Process1,
            pc: 0,
            latched: header,
            valid_out: false,
            forward_out: false,
            hold: false,
        };
        self.cycles = 0;
        self.trace = record_trace.then(Vec::new);
        Ok(())
    }

    /// Advances one clock: fetch, select, compare, update the program
    /// counter. Returns the register snapshot after the clock.
    pub fn step(&mut self) -> Result<EngineState, EngineError> {
        if !matches!(self.state.fsm, Fsm::Process1 | Fsm::Process2) {
            return Err(EngineError::Idle);
        }
        let result = self.clock();
        if result.is_err() {
            self.state.fsm = Fsm::Idle;
            self.state.hold = true;
        }
        result
    }

    fn clock(&mut self) -> Result<EngineState, EngineError> {
        if self.cycles >= WATCHDOG_STEPS {
            return Err(EngineError::Watchdog { steps: self.cycles });
        }
        let pc = self.state.pc;
        let sr = *self.image.get(usize::from(pc)).ok_or(EngineError::PcOutOfRange {
            pc: usize::from(pc),
            len: self.image.len(),
        })?;
        let subfield = sr
            .selector
            .subfield(&self.state.latched)
            .ok_or(EngineError::InvalidSelector {
                pc,
                selector: sr.selector.index(),
            })?;
        let matched = sr.op.eval(subfield, sr.operand);
        self.cycles += 1;

        // process_2: is the inspection finished?
        let next = match (matched, sr.action) {
            (true, true) => None,
            (true, false) if sr.jump => Some(usize::from(sr.address)),
            (true, false) => Some(usize::from(pc) + 1),
            (false, _) => Some(usize::from(sr.address)),
        };
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEntry {
                cycle: self.cycles,
                pc,
                word: sr.encode(),
                selector: sr.selector,
                subfield,
                op: sr.op,
                operand: sr.operand,
                matched,
                next_pc: next.map(|n| n as u8),
            });
        }
        match next {
            None => {
                self.state.fsm = Fsm::Stop;
                self.state.valid_out = sr.jump;
                self.state.forward_out = true;
                self.state.hold = true;
            }
            Some(n) if n >= self.image.len() => {
                return Err(EngineError::PcOutOfRange {
                    pc: n,
                    len: self.image.len(),
                });
            }
            Some(n) => {
                self.state.pc = n as u8;
                self.state.fsm = Fsm::Process1;
            }
        }
        Ok(self.state)
    }

    fn run(&mut self, header: PacketHeader, record_trace: bool) -> Result<Verdict, EngineError> {
        self.start(header, record_trace)?;
        loop {
            if self.step()?.fsm == Fsm::Stop {
                break;
            }
        }
        let verdict = Verdict {
            permit: self.state.valid_out,
            cycles: self.cycles,
            trace: self.trace.take(),
        };
        // stop → idle; outputs stay latched until the next START or RESET.
        self.state.fsm = Fsm::Idle;
        self.state.forward_out = false;
        Ok(verdict)
    }

    /// START, clock until stop, return the verdict. The engine is idle again
    /// afterwards.
    pub fn classify(&mut self, header: PacketHeader) -> Result<Verdict, EngineError> {
        self.run(header, false)
    }

    /// Like [`Engine::classify`], also recording every executed word.
    pub fn classify_traced(&mut self, header: PacketHeader) -> Result<Verdict, EngineError> {
        self.run(header, true)
    }
}
