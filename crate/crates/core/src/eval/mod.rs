//! Metrics: oracle OCR, IoU, BLEU, Structure-BLEU, SSIM, WER and corpus reports.

pub mod metrics;
pub mod ocr;
pub mod report;
pub mod ssim;
pub mod structure;

pub use metrics::{bleu, iou, wer, BleuStats};
pub use ocr::{oracle_ocr, OcrConfig, OcrResult};
pub use report::{evaluate_corpus, EvalConfig, MetricReport};
pub use ssim::ssim;
pub use structure::{match_boxes, structure_bleu, StructureBleu};
