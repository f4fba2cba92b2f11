//! Proportional cost model for single-row versus multi-row INSERTs.
//!
//! A statement pays fixed overheads (connect 3, send 2, parse 2, close 1)
//! plus, per row, one unit per unit of row size and one unit per index.
//! Single mode pays the overheads once per row; bulk mode once per batch.
//! Costs are dimensionless, so only ratios between them are meaningful.
//!
//! The model is generic over the scalar: use [`crate::CostParams`] for `f64`
//! or [`crate::ExactCostParams`] for exact rationals.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num};
use thiserror::Error;

pub const CONNECT_COST: u64 = 3;
pub const SEND_COST: u64 = 2;
pub const PARSE_COST: u64 = 2;
pub const ROW_UNIT_COST: u64 = 1;
pub const INDEX_UNIT_COST: u64 = 1;
pub const CLOSE_COST: u64 = 1;

/// Scalars the cost model can be evaluated in.
pub trait CostScalar: Num + Copy + PartialOrd + FromPrimitive + Debug {}

impl<T: Num + Copy + PartialOrd + FromPrimitive + Debug> CostScalar for T {}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("row count must be at least 1, got {0}")]
    DomainError(u64),
    #[error("row size must be positive")]
    NonPositiveRowSize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InsertCostParams<T> {
    row_size: T,
    index_count: u32,
}

fn lift<T: CostScalar>(v: u64) -> T {
    T::from_u64(v).expect("cost constant fits scalar")
}

impl<T: CostScalar> InsertCostParams<T> {
    pub fn new(row_size: T, index_count: u32) -> Result<Self, CostError> {
        if row_size > T::zero() {
            Ok(InsertCostParams { row_size, index_count })
        } else {
            Err(CostError::NonPositiveRowSize)
        }
    }

    /// Row size is the column count, indexes are the foreign keys.
    pub fn for_entity(text_columns: u32, foreign_keys: u32) -> Self {
        Self::new(lift(u64::from(text_columns.max(1))), foreign_keys).unwrap()
    }

    pub fn row_size(&self) -> T {
        self.row_size
    }

    pub fn index_count(&self) -> u32 {
        self.index_count
    }

    /// Connect + send + parse + close.
    pub fn statement_overhead(&self) -> T {
        lift(CONNECT_COST + SEND_COST + PARSE_COST + CLOSE_COST)
    }

    /// Row insertion plus index maintenance for one row.
    pub fn per_row_cost(&self) -> T {
        lift::<T>(ROW_UNIT_COST) * self.row_size + lift::<T>(INDEX_UNIT_COST * u64::from(self.index_count))
    }

    fn check(n: u64) -> Result<T, CostError> {
        if n == 0 {
            return Err(CostError::DomainError(n));
        }
        Ok(lift(n))
    }

    /// `n` statements of one row each.
    pub fn single_mode_cost(&self, n: u64) -> Result<T, CostError> {
        let n = Self::check(n)?;
        Ok(n * (self.statement_overhead() + self.per_row_cost()))
    }

    /// One statement carrying `n` rows.
    pub fn bulk_mode_cost(&self, n: u64) -> Result<T, CostError> {
        let n = Self::check(n)?;
        Ok(self.statement_overhead() + n * self.per_row_cost())
    }

    pub fn predicted_speedup(&self, n: u64) -> Result<T, CostError> {
        Ok(self.single_mode_cost(n)? / self.bulk_mode_cost(n)?)
    }

    /// Supremum of `predicted_speedup` as `n` grows without bound.
    pub fn speedup_bound(&self) -> T {
        (self.statement_overhead() + self.per_row_cost()) / self.per_row_cost()
    }
}
