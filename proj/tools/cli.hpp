/**
 * Copyright 2026 The bertopt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef BERTOPT_TOOLS_CLI_HPP_
#define BERTOPT_TOOLS_CLI_HPP_

#include <string>
#include <vector>

namespace bertopt {

// Full command-line entry point, args[0] being the program name. Returns
// the process exit code: 0 iff every requested output was written. main()
// is a thin wrapper, so in-process calls exercise the same code path as
// the installed binary.
int run_cli(const std::vector<std::string>& args);

}  // namespace bertopt

#endif  // BERTOPT_TOOLS_CLI_HPP_
