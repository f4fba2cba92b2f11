//! Benchmark harness for the write-coalescing proxy: a database-backed mock
//! origin, a sequential load generator and report generation.

pub mod db;
pub mod ladder;
pub mod mock_upstream;
pub mod report;
pub mod schema;

pub use db::{capture_timing, InsertDb, Measurement, MeasurementError, SqliteDb, StatementTiming};
pub use ladder::{run_ladder, BenchError, BenchSample, LadderOptions, Mode};
pub use mock_upstream::{serve_mock_upstream, MockUpstreamServer, StatementRecord};
pub use report::{build_report, BenchReport, ReportError};
pub use schema::{EntitySchema, ALL_ENTITIES};
