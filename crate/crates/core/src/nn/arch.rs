use std::fmt;

use super::layer::{BatchNorm, Dense, Layer};
use super::model::Mlp;
use crate::{rng, Error, Result};

/// Default input width: 111 ROIs give 111·110/2 connectivity features.
pub const DEFAULT_INPUT_DIM: usize = 6105;

/// Architectures of the experiment tables plus parametric variants.
///
/// Id strings (`Arch::parse`):
/// - `fed-mlp[:IN]`: Dropout(0.5), FC(IN,16), ReLU, BN, Dropout(0.5), FC(16,2), Softmax
/// - `single-mlp[:IN]`: same with 8 hidden units
/// - `gate[:IN]`: FC(IN,1), Sigmoid
/// - `output-gate`: FC(2,1), Sigmoid over the two experts' positive-class scores
/// - `discriminator[:IN]`: FC(IN,8), ReLU, FC(8,1), Sigmoid
/// - `mlp:IN-H-OUT[:dROPOUT]`: the fed-mlp layout with arbitrary sizes
/// - `dense:IN-OUT`: FC(IN,OUT), Softmax
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    Mlp {
        input: usize,
        hidden: usize,
        output: usize,
        dropout: f64,
    },
    Gate { input: usize },
    OutputGate,
    Discriminator { input: usize },
    Linear { input: usize, output: usize },
}

impl Arch {
    pub fn fed_mlp(input: usize) -> Self {
        Arch::Mlp {
            input,
            hidden: 16,
            output: 2,
            dropout: 0.5,
        }
    }

    pub fn single_mlp(input: usize) -> Self {
        Arch::Mlp {
            input,
            hidden: 8,
            output: 2,
            dropout: 0.5,
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        let unknown = || Error::UnknownArch(id.to_string());
        let (name, rest) = match id.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (id, None),
        };
        let input_or_default = |rest: Option<&str>| -> Result<usize> {
            match rest {
                None => Ok(DEFAULT_INPUT_DIM),
                Some(r) => r.parse().map_err(|_| unknown()),
            }
        };
        let dims = |s: &str| -> Result<Vec<usize>> {
            s.split('-').map(|p| p.parse().map_err(|_| unknown())).collect()
        };
        match name {
            "fed-mlp" => Ok(Arch::fed_mlp(input_or_default(rest)?)),
            "single-mlp" => Ok(Arch::single_mlp(input_or_default(rest)?)),
            "gate" => Ok(Arch::Gate {
                input: input_or_default(rest)?,
            }),
            "output-gate" if rest.is_none() => Ok(Arch::OutputGate),
            "discriminator" => Ok(Arch::Discriminator {
                input: input_or_default(rest)?,
            }),
            "mlp" => {
                let rest = rest.ok_or_else(unknown)?;
                let (sizes, dropout) = match rest.split_once(":d") {
                    Some((s, d)) => (s, d.parse::<f64>().map_err(|_| unknown())?),
                    None => (rest, 0.0),
                };
                match dims(sizes)?.as_slice() {
                    &[input, hidden, output] => Ok(Arch::Mlp {
                        input,
                        hidden,
                        output,
                        dropout,
                    }),
                    _ => Err(unknown()),
                }
            }
            "dense" => match dims(rest.ok_or_else(unknown)?)?.as_slice() {
                &[input, output] => Ok(Arch::Linear { input, output }),
                _ => Err(unknown()),
            },
            _ => Err(unknown()),
        }
    }

    /// Parses `id` and binds the input width to `input`. An explicit width in
    /// `id` must agree with `input`.
    pub fn resolve(id: &str, input: usize) -> Result<Self> {
        let mut arch = Self::parse(id)?;
        let explicit = match id.split_once(':') {
            Some((name, _)) => !matches!(name, "output-gate"),
            None => false,
        };
        if explicit && arch.input_dim() != input {
            return Err(Error::Dimension {
                context: "architecture input width",
                expected: input,
                actual: arch.input_dim(),
            });
        }
        match &mut arch {
            Arch::Mlp { input: i, .. }
            | Arch::Gate { input: i }
            | Arch::Discriminator { input: i }
            | Arch::Linear { input: i, .. } => *i = input,
            Arch::OutputGate => {}
        }
        Ok(arch)
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::Mlp { input, .. }
            | Arch::Gate { input }
            | Arch::Discriminator { input }
            | Arch::Linear { input, .. } => input,
            Arch::OutputGate => 2,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Arch::Mlp {
                input,
                hidden: 16,
                output: 2,
                dropout,
            } if dropout == 0.5 => write!(f, "fed-mlp:{input}"),
            Arch::Mlp {
                input,
                hidden: 8,
                output: 2,
                dropout,
            } if dropout == 0.5 => write!(f, "single-mlp:{input}"),
            Arch::Mlp {
                input,
                hidden,
                output,
                dropout,
            } => {
                if dropout == 0.0 {
                    write!(f, "mlp:{input}-{hidden}-{output}")
                } else {
                    write!(f, "mlp:{input}-{hidden}-{output}:d{dropout}")
                }
            }
            Arch::Gate { input } => write!(f, "gate:{input}"),
            Arch::OutputGate => write!(f, "output-gate"),
            Arch::Discriminator { input } => write!(f, "discriminator:{input}"),
            Arch::Linear { input, output } => write!(f, "dense:{input}-{output}"),
        }
    }
}

/// Builds a freshly initialised model; identical seeds give bitwise-identical
/// models.
pub fn init_model(arch: &Arch, seed: u64) -> Result<Mlp> {
    let mut rng = rng::stream(seed, "init");
    let mut layers = Vec::new();
    match *arch {
        Arch::Mlp {
            input,
            hidden,
            output,
            dropout,
        } => {
            if dropout > 0.0 {
                layers.push(Layer::Dropout { rate: dropout });
            }
            layers.push(Layer::Dense(Dense::init(input, hidden, &mut rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::BatchNorm(BatchNorm::new(hidden)));
            if dropout > 0.0 {
                layers.push(Layer::Dropout { rate: dropout });
            }
            layers.push(Layer::Dense(Dense::init(hidden, output, &mut rng)));
            layers.push(Layer::Softmax);
        }
        Arch::Gate { input } => {
            layers.push(Layer::Dense(Dense::init(input, 1, &mut rng)));
            layers.push(Layer::Sigmoid);
        }
        Arch::OutputGate => {
            layers.push(Layer::Dense(Dense::init(2, 1, &mut rng)));
            layers.push(Layer::Sigmoid);
        }
        Arch::Discriminator { input } => {
            layers.push(Layer::Dense(Dense::init(input, 8, &mut rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::Dense(Dense::init(8, 1, &mut rng)));
            layers.push(Layer::Sigmoid);
        }
        Arch::Linear { input, output } => {
            layers.push(Layer::Dense(Dense::init(input, output, &mut rng)));
            layers.push(Layer::Softmax);
        }
    }
    if layers.iter().any(|l| matches!(l, Layer::Dense(d) if d.in_dim() == 0 || d.out_dim() == 0)) {
        return Err(Error::UnknownArch(format!("{arch} has an empty layer")));
    }
    Mlp::new(arch.to_string(), layers)
}
