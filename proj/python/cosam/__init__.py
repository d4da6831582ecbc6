"""Collaborative detection + promptable segmentation for small low-contrast
targets in volumetric stacks.

The heavy lifting lives in the compiled extension; this package re-exports it.
"""

try:
    from cosam._cosam import (  # installed layout: extension inside the package
        Cosam,
        ap50,
        boxes_from_mask,
        dice,
        extract_window,
        generate_dataset,
        generate_phantom,
        iou,
        load_volume,
        split_dataset,
        truncate_and_normalize,
        __version__,
    )
except ImportError:  # build-tree layout: extension on PYTHONPATH
    from _cosam import (
        Cosam,
        ap50,
        boxes_from_mask,
        dice,
        extract_window,
        generate_dataset,
        generate_phantom,
        iou,
        load_volume,
        split_dataset,
        truncate_and_normalize,
        __version__,
    )

__all__ = [
    "Cosam",
    "ap50",
    "boxes_from_mask",
    "dice",
    "extract_window",
    "generate_dataset",
    "generate_phantom",
    "iou",
    "load_volume",
    "split_dataset",
    "truncate_and_normalize",
    "__version__",
]
