"""OR-Net super-resolution kit."""
