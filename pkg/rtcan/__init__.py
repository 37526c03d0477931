"""RT-CAN: RGB-thermal cross attention network for gas leak segmentation."""

__version__ = "1.0.0"
