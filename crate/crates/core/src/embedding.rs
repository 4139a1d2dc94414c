//! Input embedding: scalar projection, sinusoidal position, calendar stamps,
//! and a learned 1×1 blend of the three.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MONTH_VOCAB: usize = 13;
pub const DAY_VOCAB: usize = 32;
pub const HOUR_VOCAB: usize = 24;
pub const MINUTE_VOCAB: usize = 60;

/// Width of the scalar-projection kernel.
pub const PROJECTION_TAPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalendarStamp {
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
}

impl CalendarStamp {
    pub fn new(month: u32, day: u32, hour: u32, minute: u32) -> Result<Self> {
        let s = Self {
            month,
            day,
            hour,
            minute,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_datetime(t: &NaiveDateTime) -> Self {
        Self {
            month: t.month(),
            day: t.day(),
            hour: t.hour(),
            minute: t.minute(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field, value: u32, min: u32, max: u32| {
            if value < min || value > max {
                Err(Error::Index {
                    field,
                    value: value as i64,
                    min: min as i64,
                    max: max as i64,
                })
            } else {
                Ok(())
            }
        };
        check("month", self.month, 1, 12)?;
        check("day", self.day, 1, 31)?;
        check("hour", self.hour, 0, 23)?;
        check("minute", self.minute, 0, 59)
    }
}

/// `PE(i, 2j) = sin(i / 10000^{2j/d})`, `PE(i, 2j+1) = cos(...)` for positions
/// `i = 1..=len`.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = vec![0.0; len * d_model];
    for t in 0..len {
        let pos = (t + 1) as f64;
        for j in 0..d_model / 2 {
            let angle = pos / 10000f64.powf(2.0 * j as f64 / d_model as f64);
            data[t * d_model + 2 * j] = angle.sin();
            data[t * d_model + 2 * j + 1] = angle.cos();
        }
    }
    Tensor::new(&[len, d_model], data)
}

/// The four learnable stamp tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedTables {
    pub month: Tensor,
    pub day: Tensor,
    pub hour: Tensor,
    pub minute: Tensor,
}

impl TimeEmbedTables {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            month: Tensor::zeros(&[MONTH_VOCAB, d_model]),
            day: Tensor::zeros(&[DAY_VOCAB, d_model]),
            hour: Tensor::zeros(&[HOUR_VOCAB, d_model]),
            minute: Tensor::zeros(&[MINUTE_VOCAB, d_model]),
        }
    }

    fn d_model(&self) -> usize {
        self.month.shape()[1]
    }
}

/// Row `t` is the sum of the four table rows selected by `stamps[t]`.
pub fn time_embedding(stamps: &[CalendarStamp], tables: &TimeEmbedTables) -> Result<Tensor> {
    let d = tables.d_model();
    for t in [&tables.day, &tables.hour, &tables.minute] {
        if t.shape()[1] != d {
            return Err(Error::shape("time_embedding", "tables disagree on d_model"));
        }
    }
    let mut data = vec![0.0; stamps.len() * d];
    for (t, s) in stamps.iter().enumerate() {
        s.validate()?;
        let out = &mut data[t * d..(t + 1) * d];
        for (table, idx) in [
            (&tables.month, s.month),
            (&tables.day, s.day),
            (&tables.hour, s.hour),
            (&tables.minute, s.minute),
        ] {
            for (o, v) in out.iter_mut().zip(table.row(idx as usize)) {
                *o += v;
            }
        }
    }
    Tensor::new(&[stamps.len(), d], data)
}

/// Width-3 convolution over time with edge replication. `weight` is
/// `[3·d_x, d_model]`, tap-major: row `tap·d_x + ch` holds the weights applied
/// to channel `ch` at offset `tap - 1`.
pub fn scalar_projection(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let wv = g.constant(weight.clone())?;
    let y = project(&mut g, xv, wv)?;
    Ok(g.value(y).clone())
}

fn project(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let (_, d_x) = g.value(x).dims2("scalar_projection")?;
    let (rows, _) = g.value(w).dims2("scalar_projection")?;
    if rows != PROJECTION_TAPS * d_x {
        return Err(Error::shape(
            "scalar_projection",
            format!("input has d_x = {d_x}, weights expect {}", rows / PROJECTION_TAPS),
        ));
    }
    let padded = g.pad_rows_edge(x, 1, 1)?;
    let cols = g.unfold_rows(padded, PROJECTION_TAPS)?;
    g.matmul(cols, w)
}

/// `w[0]·sp + w[1]·pe + w[2]·te + bias`, pointwise.
pub fn fuse_embeddings(sp: &Tensor, pe: &Tensor, te: &Tensor, weights: [f64; 3], bias: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let inputs = [g.constant(sp.clone())?, g.constant(pe.clone())?, g.constant(te.clone())?];
    let w = g.constant(Tensor::new(&[3], weights.to_vec())?)?;
    let b = g.constant(Tensor::scalar(bias))?;
    let y = g.blend(inputs, w, Some(b))?;
    Ok(g.value(y).clone())
}

/// Parameter names and forward pass of one embedding block.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub prefix: String,
    pub d_x: usize,
    pub d_model: usize,
    pub fuse_bias: bool,
}

impl Embedding {
    pub fn new(prefix: &str, d_x: usize, d_model: usize, fuse_bias: bool) -> Self {
        Self {
            prefix: prefix.to_string(),
            d_x,
            d_model,
            fuse_bias,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan = PROJECTION_TAPS * self.d_x;
        store.fan_in(&self.name("sp.w"), &[fan, self.d_model], fan, rng);
        for (part, vocab) in [
            ("te.month", MONTH_VOCAB),
            ("te.day", DAY_VOCAB),
            ("te.hour", HOUR_VOCAB),
            ("te.minute", MINUTE_VOCAB),
        ] {
            store.uniform(&self.name(part), &[vocab, self.d_model], 0.1, rng);
        }
        // start as an even blend of the three streams
        store.insert(&self.name("fuse.w"), Tensor::full(&[3], 1.0 / 3.0));
        if self.fuse_bias {
            store.zeros(&self.name("fuse.b"), &[1]);
        }
    }

    pub fn tables(&self, store: &ParamStore) -> Result<TimeEmbedTables> {
        let get = |p: &str| {
            store
                .get(&self.name(p))
                .cloned()
                .ok_or_else(|| Error::Contract(format!("missing {}", self.name(p))))
        };
        Ok(TimeEmbedTables {
            month: get("te.month")?,
            day: get("te.day")?,
            hour: get("te.hour")?,
            minute: get("te.minute")?,
        })
    }

    /// `[L, d_x]` values plus `L` stamps to `[L, d_model]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        stamps: &[CalendarStamp],
    ) -> Result<Var> {
        let (l, d_x) = x.dims2("embedding")?;
        if d_x != self.d_x {
            return Err(Error::shape("embedding", format!("d_x = {d_x}, expected {}", self.d_x)));
        }
        if stamps.len() != l {
            return Err(Error::Input(format!("{} stamps for {l} rows", stamps.len())));
        }
        let xv = g.constant(x.clone())?;
        let w = g.param(store, &self.name("sp.w"))?;
        let sp = project(g, xv, w)?;
        let pe = g.constant(positional_encoding(l, self.d_model)?)?;

        let mut te: Option<Var> = None;
        for part in ["month", "day", "hour", "minute"] {
            let index = stamps
                .iter()
                .map(|s| {
                    s.validate()?;
                    Ok(match part {
                        "month" => s.month,
                        "day" => s.day,
                        "hour" => s.hour,
                        _ => s.minute,
                    } as usize)
                })
                .collect::<Result<Vec<_>>>()?;
            let table = g.param(store, &self.name(&format!("te.{part}")))?;
            let rows = g.gather_rows(table, index)?;
            te = Some(match te {
                Some(acc) => g.add(acc, rows)?,
                None => rows,
            });
        }
        let te = te.expect("four tables");
        let fw = g.param(store, &self.name("fuse.w"))?;
        let fb = if self.fuse_bias {
            Some(g.param(store, &self.name("fuse.b"))?)
        } else {
            None
        };
        g.blend([sp, pe, te], fw, fb)
    }
}
