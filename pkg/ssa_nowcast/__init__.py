# SSA-UNet nowcasting engine - numpy edition

__version__ = "1.0.0"
