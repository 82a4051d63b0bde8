"""Unit test package for rffcl."""
