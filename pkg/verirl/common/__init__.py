"""
Utilities shared by every command: logging, exit codes, error handling and JSONL IO
"""
