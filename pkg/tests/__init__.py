"""Tests for attr_ops."""
