"""Face video inpainting through UV texture space, at desk scale."""

__version__ = "0.1.0"
