from adaptdet.metrics.cmc import CmcReport, RankingResult, average_precision, cmc_evaluate, rank_queries
from adaptdet.metrics.coco import DetectionReport, TaskMetrics, coco_evaluate
from adaptdet.metrics.rle import box_iou, mask_iou

__all__ = [
    "CmcReport",
    "DetectionReport",
    "RankingResult",
    "TaskMetrics",
    "average_precision",
    "box_iou",
    "cmc_evaluate",
    "coco_evaluate",
    "mask_iou",
    "rank_queries",
]
