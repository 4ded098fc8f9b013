//! Ingestion, windowing, splitting, normalization, corruption and caching.

pub mod cache;
pub mod corrupt;
pub mod normalize;
pub mod source;
pub mod synthetic;
pub mod window;

pub use cache::{CacheKey, CACHE_FORMAT_VERSION};
pub use corrupt::inject_missing;
pub use normalize::{fit_apply_normalizer, Normalizer};
pub use source::{parse_timestamp, SeriesSource};
pub use synthetic::SyntheticSpec;
pub use window::{build_windows, split_chronological, Sample, SplitSpec, Splits, WindowSpec, WindowedDataset};
