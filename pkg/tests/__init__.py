"""
Test suite for AVSE.

Run tests with: pytest tests/ -v
Desk-scale acceptance runs: pytest -m slow
"""
