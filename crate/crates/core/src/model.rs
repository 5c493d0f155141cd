//! All trainable parameter groups in one place.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::compat::{predict, CompatHead};
use crate::data::DatasetBundle;
use crate::disentangler::{DisentangleDims, DisentangleNets};
use crate::error::{Error, Result};
use crate::numkernel::{cast, Matrix, Mlp, Real};
use crate::par::{self, Exec};
use crate::synthesis::{convert_net, domain_identifier};

/// Resolved layer widths of every network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub disentangle: DisentangleDims,
    pub d_a: usize,
    pub w_hidden: (usize, usize),
    pub c_hidden: (usize, usize),
    pub di_hidden: usize,
    pub edge_nets: usize,
}

impl ModelDims {
    pub fn d_h(&self) -> usize {
        self.disentangle.d_h
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub nets: DisentangleNets<T>,
    pub head: CompatHead<T>,
    pub c_center: Mlp<T>,
    pub c_edge: Vec<Mlp<T>>,
    pub di: Mlp<T>,
    /// Moving average of the MINE partition term.
    pub mine_ema: Option<T>,
}

pub const GROUP_E: &str = "E";
pub const GROUP_E_COR: &str = "E_cor";
pub const GROUP_E_IND: &str = "E_ind";
pub const GROUP_R: &str = "R";
pub const GROUP_T: &str = "T_mine";
pub const GROUP_W: &str = "W";
pub const GROUP_C_CENTER: &str = "C_center";
pub const GROUP_DI: &str = "DI";

pub fn edge_group(k: usize) -> String {
    format!("C_edge.{k}")
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, split_output: bool, bilinear: bool, rng: &mut R) -> Result<Self> {
        if dims.edge_nets == 0 {
            return Err(Error::Config("at least one edge convert net is required".into()));
        }
        let nets = DisentangleNets::new(dims.disentangle, split_output, rng)?;
        let d_h = nets.d_h();
        let head = CompatHead::new(d_h, dims.d_a, dims.w_hidden, bilinear, rng);
        let c_center = convert_net(dims.d_a, dims.c_hidden, d_h, rng);
        let c_edge = (0..dims.edge_nets)
            .map(|_| convert_net(dims.d_a, dims.c_hidden, d_h, rng))
            .collect();
        let di = domain_identifier(d_h, dims.di_hidden, rng);
        Ok(Self {
            nets,
            head,
            c_center,
            c_edge,
            di,
            mine_ema: None,
        })
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> Vec<(String, &Mlp<T>)> {
        let mut out = vec![
            (GROUP_E.to_string(), &self.nets.e),
            (GROUP_E_COR.to_string(), &self.nets.e_cor),
            (GROUP_E_IND.to_string(), &self.nets.e_ind),
            (GROUP_R.to_string(), &self.nets.r),
            (GROUP_T.to_string(), &self.nets.t_mine),
            (GROUP_W.to_string(), &self.head.net),
            (GROUP_C_CENTER.to_string(), &self.c_center),
        ];
        for (k, net) in self.c_edge.iter().enumerate() {
            out.push((edge_group(k), net));
        }
        out.push((GROUP_DI.to_string(), &self.di));
        out
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut Mlp<T>> {
        Some(match name {
            GROUP_E => &mut self.nets.e,
            GROUP_E_COR => &mut self.nets.e_cor,
            GROUP_E_IND => &mut self.nets.e_ind,
            GROUP_R => &mut self.nets.r,
            GROUP_T => &mut self.nets.t_mine,
            GROUP_W => &mut self.head.net,
            GROUP_C_CENTER => &mut self.c_center,
            GROUP_DI => &mut self.di,
            other => {
                let k: usize = other.strip_prefix("C_edge.")?.parse().ok()?;
                self.c_edge.get_mut(k)?
            }
        })
    }

    /// SHA-256 of a group's raw parameter bits, for freeze audits.
    pub fn group_hash(&self, name: &str) -> Option<String> {
        let (_, net) = self.groups().into_iter().find(|(n, _)| n == name)?;
        let mut h = Sha256::new();
        for v in net.flat_params() {
            h.update(v.to_f64().unwrap().to_le_bytes());
        }
        Some(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|(_, net)| net.flat_params().iter().all(|v| v.is_finite()))
    }

    /// Predicted class ids for `x` over every class of the bundle.
    pub fn predict(&self, x: &Matrix<T>, semantics: &Matrix<T>, class_ids: &[u32]) -> Result<Vec<u32>> {
        predict(x, semantics, class_ids, &self.nets, &self.head)
    }

    /// Predicts the given bundle rows in chunks, possibly in parallel.
    pub fn predict_rows(&self, bundle: &DatasetBundle, rows: &[usize], exec: Exec) -> Result<Vec<u32>> {
        const CHUNK: usize = 256;
        let semantics: Matrix<T> = cast(&bundle.semantics);
        let class_ids: Vec<u32> = (0..bundle.num_classes() as u32).collect();
        let chunks: Vec<&[usize]> = rows.chunks(CHUNK).collect();
        let parts = par::map(exec, &chunks, |chunk| {
            let x: Matrix<T> = cast(&bundle.features.select(ndarray::Axis(0), chunk));
            self.predict(&x, &semantics, &class_ids)
        });
        let mut out = Vec::with_capacity(rows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}
